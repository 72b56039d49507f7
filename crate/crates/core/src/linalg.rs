//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric eigenvalues in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Condition number of a symmetric matrix from its eigenvalues.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let max = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Cholesky factorization, retrying once with a diagonal jitter of
/// `1e-10 * trace / n` when the plain factorization fails. Returns the factor
/// and the jitter that was applied (zero when none was needed).
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows().max(1);
    let jitter = 1e-10 * m.trace().abs() / n as f64;
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    match Cholesky::new(shifted) {
        Some(c) => Ok((c, jitter)),
        None => Err(Error::Singular {
            condition: sym_condition(m),
        }),
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from N(0, cov) given a square-root factor `l` with `l lᵀ = cov`.
pub fn sample_with_factor<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>) -> DVector<f64> {
    l * standard_normal_vec(rng, l.ncols())
}

/// Discretizes the linear SDE `dx = A x dt + G dW` (with `G Gᵀ = diffusion`)
/// over a step `dt`. Returns `(F, Q)` with `F = exp(A dt)` and
/// `Q = ∫₀^dt exp(A s) D exp(Aᵀ s) ds`.
///
/// The block exponential `exp([[-A, D], [0, Aᵀ]] h)` is only evaluated on a
/// substep `h = dt / 2^s` with `‖A‖ h ≤ 1`; the pair is then doubled back with
/// `(F, Q) ↦ (F², F Q Fᵀ + Q)`, which stays accurate for stiff `A`.
pub fn discretize_linear_sde(
    a: &DMatrix<f64>,
    diffusion: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let norm = a.abs().row_sum().max() * dt.abs();
    let squarings = if norm > 1.0 { norm.log2().ceil() as i32 } else { 0 };
    let h = dt / 2f64.powi(squarings);
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a * h));
    block.view_mut((0, n), (n, n)).copy_from(&(diffusion * h));
    block.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * h));
    let e = block.exp();
    let g12 = e.view((0, n), (n, n)).into_owned();
    let g22 = e.view((n, n), (n, n)).into_owned();
    let mut f = g22.transpose();
    let mut q = &f * g12;
    for _ in 0..squarings {
        q = &f * &q * f.transpose() + &q;
        f = &f * &f;
    }
    symmetrize(&mut q);
    (f, q)
}

/// Stationary covariance of `dx = A x dt + G dW` for a 2x2 stable `A`:
/// solves `A P + P Aᵀ + D = 0`.
pub fn lyapunov_2x2(a: &Matrix2<f64>, d: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    // unknowns (p11, p12, p22)
    let (a11, a12, a21, a22) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let m = nalgebra::Matrix3::new(
        2.0 * a11,
        2.0 * a12,
        0.0,
        a21,
        a11 + a22,
        a12,
        0.0,
        2.0 * a21,
        2.0 * a22,
    );
    let rhs = nalgebra::Vector3::new(-d[(0, 0)], -0.5 * (d[(0, 1)] + d[(1, 0)]), -d[(1, 1)]);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Config("Lyapunov equation is singular".into()))?;
    Ok(Matrix2::new(sol[0], sol[1], sol[1], sol[2]))
}
