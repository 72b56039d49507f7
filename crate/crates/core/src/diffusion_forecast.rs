//! Nonparametric density forecasting in a data-driven eigenbasis.
//!
//! Training points from a stationary run define a diffusion-maps basis
//! `φ_j` that is orthonormal under the sampling measure. A density `p_t` is
//! stored through the coefficients `c_j = ⟨p_t/p_eq, φ_j⟩` and advanced with
//! the matrix of the one-step shift operator in that basis.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::exec;
use crate::models::{l63_drift_into, L63Params, Rk4};
use crate::rng;
use crate::table::{fmt_f64, ResultTable};
use crate::{Error, Result};

/// Diffusion-maps basis evaluated at the (deduplicated) training points.
#[derive(Debug, Clone)]
pub struct DiffusionBasis {
    /// Unique training points, one per row.
    pub points: DMatrix<f64>,
    /// `phi[(i, j)] ≈ φ_j(θ_i)`, with `φ_0 ≡ 1`.
    pub phi: DMatrix<f64>,
    /// Generator eigenvalues, `0 = λ_0 ≥ λ_1 ≥ ...`.
    pub lambdas: Vec<f64>,
    /// Kernel density estimate of the sampling density at each point.
    pub p_eq: Vec<f64>,
    pub bandwidth: f64,
    /// Orthonormality residual of the rescaled eigenvectors before the
    /// Gram-Schmidt step.
    pub raw_orthonormality: f64,
    /// Series position → row of `points`.
    pub index: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisOptions {
    pub modes: usize,
    /// Kernel `exp(−‖θ−θ'‖²/(4ε))`; `None` uses `median(‖θ_i − θ_j‖²)/(2d)`
    /// scaled by `bandwidth_scale`.
    pub bandwidth: Option<f64>,
    pub bandwidth_scale: f64,
    /// Eigenvalues of the Markov matrix below this are not resolvable.
    pub min_eigenvalue: f64,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            modes: 50,
            bandwidth: None,
            bandwidth_scale: 1.0,
            min_eigenvalue: 1e-8,
        }
    }
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gram_residual(phi: &DMatrix<f64>) -> f64 {
    let g = phi.tr_mul(phi) / phi.nrows() as f64;
    (g - DMatrix::identity(phi.ncols(), phi.ncols())).amax()
}

/// `median(‖θ_i − θ_j‖²)/(2d)` over all pairs of the first 2000 points.
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let n = points.len().min(2000);
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(sq_dist(&points[i], &points[j]));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    let mid = d2.len() / 2;
    let (_, m, _) = d2.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m / (2.0 * points[0].len() as f64)
}

/// Top `k` eigenpairs of a symmetric matrix by Lanczos with full
/// reorthogonalization, in descending order.
pub fn lanczos_top(a: &DMatrix<f64>, k: usize, seed: u64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let k = k.min(n);
    let matvec = |v: &DVector<f64>| -> DVector<f64> {
        let out = exec::map_indexed(n, |i| a.column(i).dot(v));
        DVector::from_vec(out)
    };
    let mut steps = (3 * k).max(k + 60).min(n);
    let mut g = rng::stream(seed, "lanczos", 0);
    let start = DVector::from_fn(n, |_, _| g.sample::<f64, _>(StandardNormal));
    loop {
        let mut q: Vec<DVector<f64>> = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut beta: Vec<f64> = Vec::with_capacity(steps);
        let mut v = &start / start.norm();
        for s in 0..steps {
            q.push(v.clone());
            let mut w = matvec(&v);
            let a_s = w.dot(&v);
            alpha.push(a_s);
            for _ in 0..2 {
                for qj in &q {
                    let c = qj.dot(&w);
                    w.axpy(-c, qj, 1.0);
                }
            }
            let b = w.norm();
            if s + 1 == steps || b < 1e-12 * a_s.abs().max(1.0) {
                beta.push(b);
                break;
            }
            beta.push(b);
            v = w / b;
        }
        let m = alpha.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let take = k.min(m);
        let b_last = beta[m - 1];
        let scale = eig.eigenvalues.amax().max(1e-300);
        let converged = order[..take]
            .iter()
            .all(|&i| (b_last * eig.eigenvectors[(m - 1, i)]).abs() <= 1e-8 * scale);
        if converged || m < steps || steps == n {
            let mut vecs = DMatrix::zeros(n, take);
            for (c, &i) in order[..take].iter().enumerate() {
                let y = eig.eigenvectors.column(i);
                let mut col = vecs.column_mut(c);
                for (j, qj) in q.iter().enumerate() {
                    col.axpy(y[j], qj, 1.0);
                }
            }
            let vals = order[..take].iter().map(|&i| eig.eigenvalues[i]).collect();
            return Ok((vals, vecs));
        }
        steps = (2 * steps).min(n);
    }
}

impl DiffusionBasis {
    /// Builds the basis from a time-ordered series; rows are series samples.
    pub fn build(series: &[Vec<f64>], opts: &BasisOptions) -> Result<Self> {
        let n_raw = series.len();
        if opts.modes < 1 || n_raw < 10 * opts.modes {
            return Err(Error::InsufficientData(format!(
                "basis with {} modes needs at least {} points, got {n_raw}",
                opts.modes,
                10 * opts.modes
            )));
        }
        let d = series[0].len();
        if d == 0 || series.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("training points must be finite and of equal length".into()));
        }
        let mut warnings = Vec::new();

        // exact duplicates share a row
        let mut order: Vec<usize> = (0..n_raw).collect();
        order.sort_by(|&a, &b| {
            series[a]
                .iter()
                .zip(&series[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut index = vec![0usize; n_raw];
        let mut unique: Vec<Vec<f64>> = Vec::with_capacity(n_raw);
        let mut rows = Vec::with_capacity(n_raw);
        for &i in &order {
            if unique.last().is_none_or(|u| *u != series[i]) {
                unique.push(series[i].clone());
                rows.push(i);
            }
            index[i] = unique.len() - 1;
        }
        // keep rows in first-occurrence order so the basis does not depend on sorting
        let mut perm: Vec<usize> = (0..unique.len()).collect();
        perm.sort_by_key(|&u| rows[u]);
        let mut inverse = vec![0usize; unique.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let unique: Vec<Vec<f64>> = perm.iter().map(|&u| unique[u].clone()).collect();
        for v in index.iter_mut() {
            *v = inverse[*v];
        }
        if unique.len() < n_raw {
            warn(&mut warnings, format!("{} duplicate training points merged", n_raw - unique.len()));
        }
        let n = unique.len();

        let eps = match opts.bandwidth {
            Some(e) => e,
            None => opts.bandwidth_scale * median_bandwidth(&unique),
        };
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("kernel bandwidth must be > 0, got {eps}")));
        }

        // K_ij = exp(−d²/4ε); α = 1/2 normalization targets Δ + ∇log p_eq·∇
        let mut k = DMatrix::<f64>::zeros(n, n);
        {
            let mut cols: Vec<&mut [f64]> = k.as_mut_slice().chunks_mut(n).collect();
            exec::for_each_mut(&mut cols, |j, col| {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = (-sq_dist(&unique[i], &unique[j]) / (4.0 * eps)).exp();
                }
            });
        }
        let q: Vec<f64> = (0..n).map(|j| k.column(j).sum()).collect();
        let p_eq: Vec<f64> = q
            .iter()
            .map(|qi| qi / (n as f64 * (4.0 * std::f64::consts::PI * eps).powf(d as f64 / 2.0)))
            .collect();
        let qs: Vec<f64> = q.iter().map(|v| v.sqrt()).collect();
        for j in 0..n {
            for i in 0..n {
                k[(i, j)] /= qs[i] * qs[j];
            }
        }
        let dsum: Vec<f64> = (0..n).map(|j| k.column(j).sum()).collect();
        let ds: Vec<f64> = dsum.iter().map(|v| v.sqrt()).collect();
        for j in 0..n {
            for i in 0..n {
                k[(i, j)] /= ds[i] * ds[j];
            }
        }

        let (mu, u) = lanczos_top(&k, opts.modes, 0x6469_6666)?;
        drop(k);
        let mut modes = mu.iter().take_while(|&&m| m > opts.min_eigenvalue).count();
        if modes < opts.modes {
            warn(
                &mut warnings,
                format!("only {modes} of {} modes are numerically resolvable; truncated", opts.modes),
            );
        }
        modes = modes.max(1);
        let mut phi = DMatrix::zeros(n, modes);
        for j in 0..modes {
            let mut col = phi.column_mut(j);
            for i in 0..n {
                col[i] = u[(i, j)] / ds[i];
            }
            let norm = (col.norm_squared() / n as f64).sqrt();
            col /= norm;
        }
        phi.column_mut(0).fill(1.0);
        let raw_orthonormality = gram_residual(&phi);
        // Gram-Schmidt in eigenvalue order under the sampling measure; each
        // mode only absorbs components of the modes above it
        let qr = (phi / (n as f64).sqrt()).qr();
        let r = qr.r();
        let mut phi = qr.q() * (n as f64).sqrt();
        for j in 0..modes {
            let mut col = phi.column_mut(j);
            if r[(j, j)] < 0.0 {
                col.neg_mut();
            }
            // sign convention: positive correlation with the first coordinate
            let s = (0..n).map(|i| col[i] * unique[i][0]).sum::<f64>();
            if j > 0 && s < 0.0 {
                col.neg_mut();
            }
        }
        phi.column_mut(0).fill(1.0);
        let lambdas = mu[..modes].iter().enumerate().map(|(j, &m)| if j == 0 { 0.0 } else { m.ln() / eps }).collect();

        let points = DMatrix::from_fn(n, d, |i, c| unique[i][c]);
        Ok(Self {
            points,
            phi,
            lambdas,
            p_eq,
            bandwidth: eps,
            raw_orthonormality,
            index,
            warnings,
        })
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn modes(&self) -> usize {
        self.phi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// `max |(1/N) ΦᵀΦ − I|`.
    pub fn orthonormality_residual(&self) -> f64 {
        gram_residual(&self.phi)
    }

    /// `c_l = (1/N) Σ p(θ_i) φ_l(θ_i) / p_eq(θ_i)`.
    pub fn project_density(&self, p: &[f64]) -> Result<DVector<f64>> {
        if p.len() != self.n() {
            return Err(Error::Domain(format!("expected {} density values, got {}", self.n(), p.len())));
        }
        let ratio: Vec<f64> = p.iter().zip(&self.p_eq).map(|(a, b)| a / b).collect();
        self.project_ratio(&ratio, 1.0 / self.n() as f64)
    }

    /// Coefficients of the density whose ratio to `p_eq` is proportional to
    /// `w`, normalized to unit mass.
    pub fn project_weights(&self, w: &[f64]) -> Result<DVector<f64>> {
        if w.len() != self.n() {
            return Err(Error::Domain(format!("expected {} weights, got {}", self.n(), w.len())));
        }
        let total: f64 = w.iter().sum();
        self.project_ratio(w, 1.0 / total)
    }

    fn project_ratio(&self, r: &[f64], scale: f64) -> Result<DVector<f64>> {
        if r.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("density values must be finite and nonnegative".into()));
        }
        if r.iter().all(|v| *v == 0.0) {
            return Err(Error::Domain("density is identically zero".into()));
        }
        Ok(self.phi.tr_mul(&DVector::from_column_slice(r)) * scale)
    }

    /// `Σ_j c_j φ_j(θ_i)` at every training point, unclipped.
    pub fn ratio(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.phi * c
    }

    /// Density at the training points with negative values clipped and the
    /// Monte-Carlo mass renormalized to one.
    pub fn reconstruct(&self, c: &DVector<f64>) -> Result<Reconstruction> {
        let raw = self.ratio(c);
        let n = self.n() as f64;
        let clipped = raw.iter().filter(|v| **v < 0.0).count() as f64 / n;
        let mut ratio: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let mass = ratio.iter().sum::<f64>() / n;
        if !(mass > 0.0) {
            return Err(Error::Domain("reconstructed density has no positive part".into()));
        }
        ratio.iter_mut().for_each(|v| *v /= mass);
        let density = ratio.iter().zip(&self.p_eq).map(|(r, p)| r * p).collect();
        Ok(Reconstruction {
            ratio,
            density,
            clipped_fraction: clipped,
        })
    }

    /// Importance resampling of training points with weights `∝ max(0, Σ c_j φ_j)`.
    pub fn sample<R: Rng + ?Sized>(&self, c: &DVector<f64>, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Err(Error::Config("sample size must be >= 1".into()));
        }
        let w: Vec<f64> = self.ratio(c).iter().map(|v| v.max(0.0)).collect();
        let dist = WeightedIndex::new(&w).map_err(|_| Error::Domain("all resampling weights are zero".into()))?;
        Ok((0..k).map(|_| self.point(dist.sample(rng))).collect())
    }

    /// Mean and covariance of the reconstructed density.
    pub fn moments(&self, c: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let r = self.reconstruct(c)?;
        let w = DVector::from_vec(r.ratio) / self.n() as f64;
        Ok(weighted_moments(&self.points, &w))
    }

    /// `(1/N) Σ |p/p_eq − 1|`, the L1 distance to the equilibrium density.
    pub fn l1_to_equilibrium(&self, c: &DVector<f64>) -> Result<f64> {
        let r = self.reconstruct(c)?;
        Ok(r.ratio.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / self.n() as f64)
    }

    /// CSV triplet: points, basis values, and per-mode spectrum; the last
    /// also carries `p_eq` per point in a second block.
    pub fn write_csv<W1: Write, W2: Write, W3: Write>(&self, points: W1, phi: W2, spectrum: W3) -> Result<()> {
        fn rows<W: Write>(mut w: W, header: &[String], m: &DMatrix<f64>) -> Result<()> {
            writeln!(w, "{}", header.join(","))?;
            for i in 0..m.nrows() {
                let line: Vec<String> = m.row(i).iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            Ok(())
        }
        rows(points, &(0..self.dim()).map(|c| format!("x{c}")).collect::<Vec<_>>(), &self.points)?;
        rows(phi, &(0..self.modes()).map(|c| format!("phi{c}")).collect::<Vec<_>>(), &self.phi)?;
        let mut s = spectrum;
        writeln!(s, "mode,lambda")?;
        for (j, l) in self.lambdas.iter().enumerate() {
            writeln!(s, "{j},{}", fmt_f64(*l))?;
        }
        writeln!(s, "point,p_eq")?;
        for (i, p) in self.p_eq.iter().enumerate() {
            writeln!(s, "{i},{}", fmt_f64(*p))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `p/p_eq` at the training points, mass-normalized.
    pub ratio: Vec<f64>,
    pub density: Vec<f64>,
    /// Fraction of training points where the truncated expansion was negative.
    pub clipped_fraction: f64,
}

/// Weighted mean and covariance of the rows of `points`; `w` sums to one.
pub fn weighted_moments(points: &DMatrix<f64>, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = points.tr_mul(w);
    let d = points.ncols();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..points.nrows() {
        let dx = points.row(i).transpose() - &mean;
        cov += w[i] * &dx * dx.transpose();
    }
    (mean, cov)
}

// ---------------------------------------------------------------- shift operator

#[derive(Debug, Clone)]
pub struct ShiftOperator {
    pub a: DMatrix<f64>,
    pub tau: f64,
    /// Eigenvalue moduli before stabilization, descending.
    pub raw_moduli: Vec<f64>,
    /// Whether the eigenvector fallback was used.
    pub fallback: bool,
}

/// `Â_jl = (1/(N−1)) Σ_i φ_j(θ_{i+1}) φ_l(θ_i)` over consecutive rows of
/// the series mapped through `rows`, followed by spectral stabilization.
pub fn build_shift_operator(basis: &DiffusionBasis, rows: &[usize], tau: f64) -> Result<ShiftOperator> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData("shift operator needs at least two samples".into()));
    }
    let m = basis.modes();
    let pairs = rows.len() - 1;
    let cur = DMatrix::from_fn(pairs, m, |i, l| basis.phi[(rows[i], l)]);
    let next = DMatrix::from_fn(pairs, m, |i, j| basis.phi[(rows[i + 1], j)]);
    let a = next.tr_mul(&cur) / pairs as f64;
    let raw_moduli = sorted_moduli(&a);
    let (a, fallback) = stabilize_spectrum(&a)?;
    Ok(ShiftOperator {
        a,
        tau,
        raw_moduli,
        fallback,
    })
}

fn sorted_moduli(a: &DMatrix<f64>) -> Vec<f64> {
    let mut m: Vec<f64> = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).collect();
    m.sort_by(|x, y| y.total_cmp(x));
    m
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    sorted_moduli(a).first().copied().unwrap_or(0.0)
}

/// Eigenvector of `a` for the eigenvalue `lambda` by inverse iteration.
fn eigenvector(a: &DMatrix<Complex64>, lambda: Complex64) -> Option<DVector<Complex64>> {
    let n = a.nrows();
    let shift = lambda + Complex64::new(1e-10 * lambda.norm().max(1e-3), 1e-10 * lambda.norm().max(1e-3));
    let lu = (a - DMatrix::from_diagonal_element(n, n, shift)).lu();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.3));
    for _ in 0..3 {
        v = lu.solve(&v)?;
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        v /= Complex64::new(norm, 0.0);
    }
    Some(v)
}

/// Pins `ê_1` as a fixed vector (the constant mode carries the mass) and
/// rescales every other eigenvalue of modulus above one onto the unit circle.
/// When the eigenvectors are ill-conditioned the trailing block is instead
/// divided by its spectral radius until it is at most one.
pub fn stabilize_spectrum(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let m = a.nrows();
    if m != a.ncols() || m == 0 {
        return Err(Error::Domain("shift operator must be square and non-empty".into()));
    }
    let mut out = a.clone();
    for j in 0..m {
        out[(0, j)] = 0.0;
        out[(j, 0)] = 0.0;
    }
    out[(0, 0)] = 1.0;
    if m == 1 {
        return Ok((out, false));
    }
    let b = out.view((1, 1), (m - 1, m - 1)).into_owned();
    let lams = b.clone().complex_eigenvalues();
    if lams.iter().all(|z| z.norm() <= 1.0) {
        return Ok((out, false));
    }
    let bc = b.map(|v| Complex64::new(v, 0.0));
    let cols: Option<Vec<DVector<Complex64>>> = lams.iter().map(|&l| eigenvector(&bc, l)).collect();
    let rescaled = cols.and_then(|cols| {
        let v = DMatrix::from_columns(&cols);
        let svd = v.clone().svd(false, false);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if !(smin > 1e-8 * smax) {
            return None;
        }
        let d = DMatrix::from_diagonal(&DVector::from_iterator(
            lams.len(),
            lams.iter().map(|&l| if l.norm() > 1.0 { l / l.norm() } else { l }),
        ));
        let vinv = v.clone().try_inverse()?;
        let r = &v * d * vinv;
        // the reassembly must reproduce the untouched part of the spectrum
        let back = &v * DMatrix::from_diagonal(&lams) * v.clone().try_inverse()?;
        let err = (back - &bc).map(|z| z.norm()).max();
        (err <= 1e-8 * bc.map(|z| z.norm()).max().max(1.0)).then(|| r.map(|z| z.re))
    });
    let (b_new, fallback) = match rescaled {
        Some(r) => (r, false),
        None => {
            let mut r = b;
            for _ in 0..50 {
                let rho = spectral_radius(&r);
                if rho <= 1.0 {
                    break;
                }
                r /= rho;
            }
            (r, true)
        }
    };
    out.view_mut((1, 1), (m - 1, m - 1)).copy_from(&b_new);
    Ok((out, fallback))
}

impl ShiftOperator {
    /// `c(t + nτ) = Âⁿ c(t)`.
    pub fn evolve(&self, c: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut c = c.clone();
        for _ in 0..n {
            c = &self.a * c;
        }
        c
    }

    /// `|Â ê_1 − ê_1|_∞` together with `|ê_1ᵀ Â − ê_1ᵀ|_∞`.
    pub fn fixed_vector_residual(&self) -> f64 {
        let m = self.a.nrows();
        let mut r: f64 = (self.a[(0, 0)] - 1.0).abs();
        for j in 1..m {
            r = r.max(self.a[(j, 0)].abs()).max(self.a[(0, j)].abs());
        }
        r
    }
}

// ---------------------------------------------------------------- experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub model: L63Params,
    pub training_points: usize,
    /// Sampling interval of the training series.
    pub tau: f64,
    /// RK4 step for all Lorenz-63 integrations.
    pub h: f64,
    pub spinup: f64,
    pub basis: BasisOptions,
    pub init_mean: [f64; 3],
    pub init_std: f64,
    pub ensemble: usize,
    /// Independent attractor sample the oracle ensemble is drawn from.
    pub oracle_pool: usize,
    pub oracle_pool_dt: f64,
    pub snapshot_times: Vec<f64>,
    /// Time at which forecast moments are compared with the oracle.
    pub compare_time: f64,
    /// Long-horizon check in units of the training correlation time.
    pub long_horizon_corr_times: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            model: L63Params::default(),
            training_points: 5000,
            tau: 0.1,
            h: 0.001,
            spinup: 10.0,
            basis: BasisOptions {
                bandwidth_scale: 0.02,
                ..Default::default()
            },
            init_mean: [-5.0, -7.0, 20.0],
            init_std: 6.0,
            ensemble: 5000,
            oracle_pool: 20_000,
            oracle_pool_dt: 0.05,
            snapshot_times: vec![0.0, 0.2, 0.5, 1.0, 2.0],
            compare_time: 0.5,
            long_horizon_corr_times: 20.0,
        }
    }
}

fn steps_of(t: f64, dt: f64) -> Option<usize> {
    let r = t / dt;
    ((r - r.round()).abs() <= 1e-9 * r.abs().max(1.0) && r >= -1e-12).then_some(r.round() as usize)
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0 && self.h > 0.0) || steps_of(self.tau, self.h).is_none_or(|s| s == 0) {
            return fail("tau and h must be > 0 with tau a multiple of h");
        }
        if self.training_points < 10 * self.basis.modes || self.basis.modes == 0 {
            return fail("training_points must be at least 10 x modes");
        }
        if !(self.init_std > 0.0) || self.ensemble == 0 || self.oracle_pool == 0 {
            return fail("init_std, ensemble and oracle_pool must be positive");
        }
        if steps_of(self.oracle_pool_dt, self.h).is_none_or(|s| s == 0) {
            return fail("oracle_pool_dt must be a positive multiple of h");
        }
        for &t in self.snapshot_times.iter().chain([self.compare_time].iter()) {
            if steps_of(t, self.tau).is_none() {
                return fail("snapshot and comparison times must be nonnegative multiples of tau");
            }
        }
        if !(self.long_horizon_corr_times > 0.0) {
            return fail("long_horizon_corr_times must be > 0");
        }
        Ok(())
    }
}

/// Lorenz-63 run sampled every `every` RK4 steps.
pub fn l63_series(p: &L63Params, n: usize, h: f64, every: usize, spinup: f64, x0: [f64; 3]) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(3);
    let mut f = |_t: f64, s: &[f64], out: &mut [f64]| l63_drift_into(s, p, out);
    for k in 0..(spinup / h).round() as usize {
        rk.step(&mut f, k as f64 * h, h, &mut x)?;
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x.clone());
        for _ in 0..every {
            rk.step(&mut f, 0.0, h, &mut x)?;
        }
    }
    Ok(out)
}

fn gaussian_weight(x: &[f64], mean: &[f64; 3], std: f64) -> f64 {
    (-0.5 * sq_dist(x, mean) / (std * std)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentComparison {
    pub time: f64,
    pub mean_rel_err: f64,
    pub second_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionRun {
    pub basis: DiffusionBasis,
    pub operator: ShiftOperator,
    pub orthonormality: f64,
    pub fixed_vector_residual: f64,
    pub spectral_radius: f64,
    pub correlation_time: f64,
    pub long_horizon_l1: f64,
    pub shuffled_l1: f64,
    pub shuffled_noise_floor: f64,
    pub comparison: MomentComparison,
    pub moments_table: ResultTable,
    pub spectrum_table: ResultTable,
    pub snapshot_table: ResultTable,
    pub summary_table: ResultTable,
}

fn raw_second(mean: &DVector<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov + mean * mean.transpose()
}

pub fn run_diffusion_experiment(cfg: &DiffusionConfig, seed: u64) -> Result<DiffusionRun> {
    cfg.validate()?;
    let every = steps_of(cfg.tau, cfg.h).unwrap();
    let mut g = rng::stream(seed, "ex6", 0);
    let x0 = |g: &mut rng::Rng| -> [f64; 3] { std::array::from_fn(|_| g.sample::<f64, _>(StandardNormal)) };
    let series = l63_series(&cfg.model, cfg.training_points, cfg.h, every, cfg.spinup, x0(&mut g))?;
    let basis = DiffusionBasis::build(&series, &cfg.basis)?;
    let operator = build_shift_operator(&basis, &basis.index, cfg.tau)?;

    // initial density: the Gaussian restricted to the attractor sample
    let w0: Vec<f64> = (0..basis.n())
        .map(|i| gaussian_weight(&basis.point(i), &cfg.init_mean, cfg.init_std))
        .collect();
    let c0 = basis.project_weights(&w0)?;

    // oracle: resample an independent attractor sample with the same weights
    let pool_every = steps_of(cfg.oracle_pool_dt, cfg.h).unwrap();
    let pool = l63_series(&cfg.model, cfg.oracle_pool, cfg.h, pool_every, cfg.spinup, x0(&mut g))?;
    let pw: Vec<f64> = pool.iter().map(|x| gaussian_weight(x, &cfg.init_mean, cfg.init_std)).collect();
    let pick = WeightedIndex::new(&pw).map_err(|_| Error::Config("initial Gaussian misses the attractor sample".into()))?;
    let mut members: Vec<Vec<f64>> = (0..cfg.ensemble).map(|_| pool[pick.sample(&mut g)].clone()).collect();

    let mut times = cfg.snapshot_times.clone();
    if !times.iter().any(|t| (t - cfg.compare_time).abs() < 1e-12) {
        times.push(cfg.compare_time);
    }
    times.sort_by(|a, b| a.total_cmp(b));

    let mut moments_table = ResultTable::labeled(
        "ex6_moments",
        "method",
        &["t", "mean_x", "mean_y", "mean_z", "var_x", "var_y", "var_z", "clipped"],
    );
    let mut snapshot_table = ResultTable::labeled("ex6_snapshots", "method", &["t", "x_plus_y", "z", "weight"]);
    let mut comparison = None;
    let mut c = c0.clone();
    let mut t_now = 0usize;
    let f = |_t: f64, s: &[f64], out: &mut [f64]| l63_drift_into(s, &cfg.model, out);
    for &t in &times {
        let n = steps_of(t, cfg.tau).unwrap();
        c = operator.evolve(&c, n - t_now);
        let steps = (n - t_now) * every;
        exec::for_each_mut(&mut members, |_, x| {
            let mut rk = Rk4::new(3);
            let mut f = f;
            for _ in 0..steps {
                if rk.step(&mut f, 0.0, cfg.h, x).is_err() {
                    break;
                }
            }
        });
        t_now = n;

        let rec = basis.reconstruct(&c)?;
        let w = DVector::from_column_slice(&rec.ratio) / basis.n() as f64;
        let (dm, dc) = weighted_moments(&basis.points, &w);
        let ens = DMatrix::from_fn(members.len(), 3, |i, j| members[i][j]);
        let ew = DVector::from_element(members.len(), 1.0 / members.len() as f64);
        let (em, ec) = weighted_moments(&ens, &ew);
        for (label, m, cv, clip) in [("diffusion", &dm, &dc, rec.clipped_fraction), ("ensemble", &em, &ec, 0.0)] {
            moments_table.push_labeled(label, vec![t, m[0], m[1], m[2], cv[(0, 0)], cv[(1, 1)], cv[(2, 2)], clip])?;
        }
        if cfg.snapshot_times.iter().any(|s| (s - t).abs() < 1e-12) {
            for i in 0..basis.n() {
                if rec.ratio[i] > 0.0 {
                    let p = basis.point(i);
                    snapshot_table.push_labeled("diffusion", vec![t, p[0] + p[1], p[2], w[i]])?;
                }
            }
            for x in &members {
                snapshot_table.push_labeled("ensemble", vec![t, x[0] + x[1], x[2], 1.0 / members.len() as f64])?;
            }
        }
        if (t - cfg.compare_time).abs() < 1e-12 {
            let (s_d, s_e) = (raw_second(&dm, &dc), raw_second(&em, &ec));
            comparison = Some(MomentComparison {
                time: t,
                mean_rel_err: (&dm - &em).norm() / em.norm(),
                second_rel_err: (s_d - &s_e).norm() / s_e.norm(),
            });
        }
    }

    // long horizon
    let x_acf = diagnostics::acf(&series.iter().map(|s| s[0]).collect::<Vec<_>>(), series.len() / 4)?;
    let corr_steps = diagnostics::correlation_time(&x_acf)
        .ok_or_else(|| Error::InsufficientData("training series too short for its correlation time".into()))?;
    let correlation_time = corr_steps * cfg.tau;
    let n_long = (cfg.long_horizon_corr_times * corr_steps).ceil() as usize;
    let long_horizon_l1 = basis.l1_to_equilibrium(&operator.evolve(&c0, n_long))?;

    // shuffled control: pairs without dynamics
    let mut shuffled = basis.index.clone();
    shuffled.shuffle(&mut rng::stream(seed, "ex6_shuffle", 0));
    let control = build_shift_operator(&basis, &shuffled, cfg.tau)?;
    let shuffled_l1 = basis.l1_to_equilibrium(&control.evolve(&c0, 1))?;
    // sampling noise in the shuffled estimate is O(1/sqrt N) per entry
    let shuffled_noise_floor = (basis.modes() as f64 / basis.n() as f64).sqrt() * c0.norm();
    let initial_l1 = basis.l1_to_equilibrium(&c0)?;

    let mut spectrum_table = ResultTable::new("ex6_spectrum", &["mode", "lambda", "raw_modulus", "stable_modulus"]);
    let stable = sorted_moduli(&operator.a);
    for j in 0..basis.modes() {
        spectrum_table.push(vec![j as f64, basis.lambdas[j], operator.raw_moduli[j], stable[j]])?;
    }
    let orthonormality = basis.orthonormality_residual();
    let fixed_vector_residual = operator.fixed_vector_residual();
    let spectral_radius = stable[0];
    let comparison = comparison.expect("compare_time is among the forecast times");
    let mut summary_table = ResultTable::labeled("ex6_summary", "metric", &["value"]);
    for (k, v) in [
        ("points", basis.n() as f64),
        ("modes", basis.modes() as f64),
        ("bandwidth", basis.bandwidth),
        ("raw_orthonormality_residual", basis.raw_orthonormality),
        ("orthonormality_residual", orthonormality),
        ("fixed_vector_residual", fixed_vector_residual),
        ("spectral_radius", spectral_radius),
        ("stabilization_fallback", f64::from(u8::from(operator.fallback))),
        ("correlation_time", correlation_time),
        ("long_horizon_l1", long_horizon_l1),
        ("initial_l1", initial_l1),
        ("shuffled_one_step_l1", shuffled_l1),
        ("shuffled_noise_floor", shuffled_noise_floor),
        ("mean_rel_err", comparison.mean_rel_err),
        ("second_moment_rel_err", comparison.second_rel_err),
    ] {
        summary_table.push_labeled(k, vec![v])?;
    }

    Ok(DiffusionRun {
        basis,
        operator,
        orthonormality,
        fixed_vector_residual,
        spectral_radius,
        correlation_time,
        long_horizon_l1,
        shuffled_l1,
        shuffled_noise_floor,
        comparison,
        moments_table,
        spectrum_table,
        snapshot_table,
        summary_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Exact OU path `dθ = −θ dt + √2 dW` sampled every `tau`.
    fn ou_series(n: usize, tau: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut g = rng::stream(seed, "ou", 0);
        let a = (-tau).exp();
        let s = (1.0 - a * a).sqrt();
        let mut x: f64 = g.sample(StandardNormal);
        (0..n)
            .map(|_| {
                let out = vec![x];
                x = a * x + s * g.sample::<f64, _>(StandardNormal);
                out
            })
            .collect()
    }

    fn ou_basis_with(modes: usize, tau: f64, bandwidth: f64) -> (Vec<Vec<f64>>, DiffusionBasis) {
        ou_basis_sized(3000, modes, tau, bandwidth)
    }

    fn ou_basis_sized(n: usize, modes: usize, tau: f64, bandwidth: f64) -> (Vec<Vec<f64>>, DiffusionBasis) {
        let series = ou_series(n, tau, 1);
        let b = DiffusionBasis::build(
            &series,
            &BasisOptions {
                modes,
                bandwidth: Some(bandwidth),
                ..Default::default()
            },
        )
        .unwrap();
        (series, b)
    }

    fn ou_basis(modes: usize) -> (Vec<Vec<f64>>, DiffusionBasis) {
        ou_basis_with(modes, 0.1, 0.05)
    }

    fn sign_changes(b: &DiffusionBasis, j: usize) -> usize {
        let mut idx: Vec<usize> = (0..b.n()).collect();
        idx.sort_by(|&x, &y| b.points[(x, 0)].total_cmp(&b.points[(y, 0)]));
        // ignore the sparse tails where the estimate is noisy
        let lo = b.n() / 200;
        let vals: Vec<f64> = idx[lo..b.n() - lo].iter().map(|&i| b.phi[(i, j)]).collect();
        let smooth: Vec<f64> = vals.chunks(20).map(|c| c.iter().sum::<f64>()).collect();
        smooth.windows(2).filter(|w| w[0] * w[1] < 0.0).count()
    }

    #[test]
    fn ou_basis_is_hermite_like() {
        // smaller bandwidths pick up modes localized on isolated tail points
        let (_, b) = ou_basis_sized(5000, 5, 0.5, 0.15);
        assert_eq!(b.modes(), 5);
        assert!(b.phi.column(0).iter().all(|v| *v == 1.0));
        assert_eq!(b.lambdas[0], 0.0);
        for j in 1..5 {
            // the outer roots of the fourth mode sit where a fixed bandwidth
            // has too few points to resolve them
            if j < 4 {
                assert_eq!(sign_changes(&b, j), j, "mode {j}");
            }
            assert!(b.lambdas[j] <= b.lambdas[j - 1]);
            // generator eigenvalues of the OU process are −j
            assert!((b.lambdas[j] + j as f64).abs() < 0.25 * j as f64, "lambda_{j} = {}", b.lambdas[j]);
        }
        assert!(b.orthonormality_residual() < 0.05);
    }

    #[test]
    fn ou_operator_spectrum_matches_generator() {
        let (series, b) = ou_basis(4);
        let op = build_shift_operator(&b, &b.index, 0.1).unwrap();
        let mut moduli = op.raw_moduli.clone();
        moduli.truncate(4);
        for (j, m) in moduli.iter().enumerate() {
            let exact = (-(j as f64) * 0.1).exp();
            assert!((m - exact).abs() / exact < 0.1, "mode {j}: {m} vs {exact}");
        }
        assert_eq!(series.len(), b.index.len());
    }

    #[test]
    fn lanczos_matches_dense_eigensolver() {
        let mut g = rng::stream(2, "t", 0);
        let x = DMatrix::from_fn(60, 60, |_, _| g.sample::<f64, _>(StandardNormal));
        let a = &x * x.transpose();
        let (vals, vecs) = lanczos_top(&a, 5, 9).unwrap();
        let mut dense: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
        dense.sort_by(|p, q| q.total_cmp(p));
        for j in 0..5 {
            assert_relative_eq!(vals[j], dense[j], max_relative = 1e-9);
            let v = vecs.column(j);
            assert!((&a * v - v * vals[j]).norm() < 1e-6 * vals[0]);
        }
    }

    #[test]
    fn equilibrium_projection_and_reconstruction() {
        let (_, b) = ou_basis(6);
        let c = b.project_density(&b.p_eq).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-12);
        for j in 1..6 {
            assert!(c[j].abs() < 1e-6 + 0.05, "c_{j} = {}", c[j]);
        }
        let e1 = DVector::from_fn(6, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let r = b.reconstruct(&e1).unwrap();
        for (p, q) in r.density.iter().zip(&b.p_eq) {
            assert_relative_eq!(p, q, max_relative = 1e-12);
        }
        assert!(b.project_density(&vec![0.0; b.n()]).is_err());
    }

    #[test]
    fn projection_recovers_second_mode() {
        let (_, b) = ou_basis(6);
        // p = (1 + 0.5 φ_1) p_eq stays positive for |φ_1| < 2
        let p: Vec<f64> = (0..b.n()).map(|i| (1.0 + 0.5 * b.phi[(i, 1)]).max(0.0) * b.p_eq[i]).collect();
        let c = b.project_density(&p).unwrap();
        assert!((c[0] - 1.0).abs() < 0.02);
        assert!((c[1] - 0.5).abs() < 0.05, "c_1 = {}", c[1]);
        let mass = b.reconstruct(&c).unwrap().ratio.iter().sum::<f64>() / b.n() as f64;
        assert!((mass - 1.0).abs() < 0.02);
    }

    #[test]
    fn stabilization_examples() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.2, 0.0, 0.0, 0.0, 0.5]);
        let (s, fb) = stabilize_spectrum(&a).unwrap();
        assert!(!fb);
        assert_relative_eq!(s, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5]), epsilon = 1e-10);

        let stable = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.3, 0.4, 0.0, -0.4, 0.3]);
        let (s, _) = stabilize_spectrum(&stable).unwrap();
        assert_relative_eq!(s, stable, epsilon = 1e-10);

        // rotation-dilation: complex pair of modulus 1.25
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.75, -1.0, 0.0, 1.0, 0.75]);
        let (s, _) = stabilize_spectrum(&a).unwrap();
        assert!((spectral_radius(&s) - 1.0).abs() < 1e-10);
        let mut p = s.clone();
        for _ in 0..10_000 {
            p = &p * &s;
        }
        assert!(p.amax() < 10.0);
    }

    #[test]
    fn defective_block_uses_fallback() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.1, 1.0, 0.0, 0.0, 1.1]);
        let (s, fb) = stabilize_spectrum(&a).unwrap();
        assert!(fb);
        assert!(spectral_radius(&s) <= 1.0 + 1e-12);
    }

    #[test]
    fn identity_and_shuffled_series() {
        let (series, b) = ou_basis(5);
        let frozen = vec![0usize; 2];
        let op = build_shift_operator(&b, &frozen, 0.1).unwrap();
        assert_eq!(op.a.nrows(), 5);

        // repeated rows: θ_{i+1} = θ_i gives the empirical Gram matrix, ≈ I
        let rows: Vec<usize> = (0..b.n()).flat_map(|i| [i, i]).collect();
        let mut doubled = build_shift_operator(&b, &rows, 0.1).unwrap().a;
        doubled.fill_diagonal(0.0);
        assert!(doubled.amax() < 0.06);

        let mut shuffled = b.index.clone();
        shuffled.shuffle(&mut rng::stream(3, "t", 0));
        let op = build_shift_operator(&b, &shuffled, 0.1).unwrap();
        let mut rest = op.a.clone();
        rest[(0, 0)] = 0.0;
        assert!(rest.amax() < 0.1, "largest cross term {}", rest.amax());
        assert_eq!(series.len(), shuffled.len());
    }

    #[test]
    fn evolution_preserves_mass_and_converges() {
        let (_, b) = ou_basis(6);
        let op = build_shift_operator(&b, &b.index, 0.1).unwrap();
        assert!(op.fixed_vector_residual() < 1e-12);
        let w: Vec<f64> = (0..b.n()).map(|i| (-(b.points[(i, 0)] - 1.0).powi(2) / 0.5).exp()).collect();
        let c0 = b.project_weights(&w).unwrap();
        assert_eq!(op.evolve(&c0, 0), c0);
        let c = op.evolve(&c0, 200);
        assert_relative_eq!(c[0], c0[0], epsilon = 1e-12);
        assert!(b.l1_to_equilibrium(&c).unwrap() < 0.05);
    }

    #[test]
    fn sampling_follows_weights() {
        let (_, b) = ou_basis(6);
        let e1 = DVector::from_fn(6, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let s = b.sample(&e1, 20_000, &mut rng::stream(4, "t", 0)).unwrap();
        let m = diagnostics::mean(&s.iter().map(|p| p[0]).collect::<Vec<_>>());
        let pool_mean = b.points.column(0).mean();
        assert!((m - pool_mean).abs() < 0.03);

        let c = DVector::from_fn(6, |i, _| [1.0, 0.5, 0.0, 0.0, 0.0, 0.0][i]);
        let (mean, _) = b.moments(&c).unwrap();
        let s = b.sample(&c, 100_000, &mut rng::stream(5, "t", 0)).unwrap();
        let sm = diagnostics::mean(&s.iter().map(|p| p[0]).collect::<Vec<_>>());
        assert!((sm - mean[0]).abs() < 0.02 * mean[0].abs().max(0.5));
        assert!(b.sample(&(-e1), 10, &mut rng::stream(5, "t", 0)).is_err());
    }

    #[test]
    fn duplicates_are_merged() {
        let mut series = ou_series(600, 0.1, 7);
        series[10] = series[3].clone();
        let b = DiffusionBasis::build(&series, &BasisOptions { modes: 5, bandwidth: Some(0.02), ..Default::default() }).unwrap();
        assert_eq!(b.n(), 599);
        assert_eq!(b.index[10], b.index[3]);
        assert_eq!(b.warnings.len(), 1);
        assert!(DiffusionBasis::build(&series[..40], &BasisOptions { modes: 5, ..Default::default() }).is_err());
    }
}
