//! Kalman analysis for Gaussian beliefs, the ensemble transform Kalman filter
//! and state-parameter augmentation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::linalg::{cholesky_with_jitter, psd_sqrt, sample_with_factor, standard_normal_vec, symmetrize};
use crate::models::Rk4;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Domain(format!(
                "covariance is {}x{} for a mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear observation operator with noise covariance.
#[derive(Debug, Clone)]
pub struct LinearObs {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    r_chol: Cholesky<f64, Dyn>,
}

impl LinearObs {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != r.ncols() || r.nrows() != h.nrows() {
            return Err(Error::Config(format!(
                "H is {}x{} but R is {}x{}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        let r_chol = Cholesky::new(r.clone())
            .ok_or_else(|| Error::Config("observation covariance R is not positive definite".into()))?;
        Ok(Self { h, r, r_chol })
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// `R⁻¹ b`.
    pub fn r_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.r_chol.solve(b)
    }
}

/// `mean ← F mean`, `cov ← F cov Fᵀ + Q`.
pub fn kf_forecast(belief: &GaussianBelief, f: &DMatrix<f64>, q: &DMatrix<f64>) -> GaussianBelief {
    let mut cov = f * &belief.cov * f.transpose() + q;
    symmetrize(&mut cov);
    GaussianBelief {
        mean: f * &belief.mean,
        cov,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub belief: GaussianBelief,
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
    /// Diagonal jitter applied to the innovation covariance, zero if none.
    pub jitter: f64,
}

/// Kalman update with a Joseph-form covariance.
pub fn kf_analysis(belief: &GaussianBelief, v: &DVector<f64>, obs: &LinearObs) -> Result<GaussianBelief> {
    kf_analysis_full(belief, v, obs).map(|a| a.belief)
}

pub fn kf_analysis_full(belief: &GaussianBelief, v: &DVector<f64>, obs: &LinearObs) -> Result<Analysis> {
    let h = &obs.h;
    if v.len() != h.nrows() || h.ncols() != belief.dim() {
        return Err(Error::Domain(format!(
            "observation of length {} against H {}x{} and state {}",
            v.len(),
            h.nrows(),
            h.ncols(),
            belief.dim()
        )));
    }
    let ph = &belief.cov * h.transpose();
    let mut s = h * &ph + &obs.r;
    symmetrize(&mut s);
    let (chol, jitter) = cholesky_with_jitter(&s)?;
    let gain = chol.solve(&ph.transpose()).transpose();
    let innovation = v - h * &belief.mean;
    let mean = &belief.mean + &gain * &innovation;
    let ikh = DMatrix::identity(belief.dim(), belief.dim()) - &gain * h;
    let mut cov = &ikh * &belief.cov * ikh.transpose() + &gain * &obs.r * gain.transpose();
    symmetrize(&mut cov);
    Ok(Analysis {
        belief: GaussianBelief { mean, cov },
        gain,
        innovation,
        jitter,
    })
}

/// Ensemble of `k` members stored as the columns of a `d × k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::DegenerateEnsemble(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        Ok(Self { members })
    }

    /// Independent draws from a Gaussian belief.
    pub fn sample<R: Rng + ?Sized>(belief: &GaussianBelief, k: usize, rng: &mut R) -> Result<Self> {
        let l = psd_sqrt(&belief.cov);
        let mut m = DMatrix::zeros(belief.dim(), k);
        for j in 0..k {
            m.set_column(j, &(&belief.mean + sample_with_factor(rng, &l)));
        }
        Self::new(m)
    }

    /// Ensemble whose empirical mean and covariance equal the belief exactly.
    /// Requires `k > d`.
    pub fn with_moments<R: Rng + ?Sized>(belief: &GaussianBelief, k: usize, rng: &mut R) -> Result<Self> {
        let d = belief.dim();
        if k <= d {
            return Err(Error::DegenerateEnsemble(format!(
                "exact moments need k > d (k={k}, d={d})"
            )));
        }
        let mut z = DMatrix::zeros(d, k);
        for j in 0..k {
            z.set_column(j, &standard_normal_vec(rng, d));
        }
        let zm = z.column_mean();
        for mut c in z.column_iter_mut() {
            c -= &zm;
        }
        let cz = &z * z.transpose() / (k as f64 - 1.0);
        let lz = Cholesky::new(cz)
            .ok_or_else(|| Error::DegenerateEnsemble("random draws are rank deficient".into()))?
            .l();
        let white = lz
            .solve_lower_triangular(&z)
            .ok_or_else(|| Error::DegenerateEnsemble("random draws are rank deficient".into()))?;
        let target = psd_sqrt(&belief.cov);
        let mut m = target * white;
        for mut c in m.column_iter_mut() {
            c += &belief.mean;
        }
        Self::new(m)
    }

    pub fn k(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Mean-removed members.
    pub fn perturbations(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut x = self.members.clone();
        for mut c in x.column_iter_mut() {
            c -= &m;
        }
        x
    }

    /// Empirical covariance with the `1/(k-1)` normalization.
    pub fn cov(&self) -> DMatrix<f64> {
        let x = self.perturbations();
        &x * x.transpose() / (self.k() as f64 - 1.0)
    }

    pub fn belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean(),
            cov: self.cov(),
        }
    }

    /// Applies `f(member index, member)` to every member, in parallel when
    /// enabled. `f` must draw randomness from a stream keyed on the index.
    pub fn forecast<F>(&mut self, f: F) -> Result<()>
    where
        F: Fn(usize, &mut [f64]) -> Result<()> + Sync + Send,
    {
        let d = self.dim();
        let mut cols: Vec<(&mut [f64], Result<()>)> =
            self.members.as_mut_slice().chunks_mut(d).map(|c| (c, Ok(()))).collect();
        exec::for_each_mut(&mut cols, |i, (c, res)| *res = f(i, c));
        cols.into_iter().map(|(_, r)| r).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtkfOptions {
    /// Multiplicative inflation of the forecast perturbations' covariance.
    #[serde(default = "one")]
    pub inflation: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for EtkfOptions {
    fn default() -> Self {
        Self { inflation: 1.0 }
    }
}

/// ETKF output with the quantities an outer adaptive filter needs.
#[derive(Debug, Clone)]
pub struct EtkfAnalysis {
    pub ensemble: Ensemble,
    /// Forecast ensemble after additive perturbation and inflation.
    pub forecast: Ensemble,
    /// Ensemble Kalman gain `Xᵇ P̃ᵃ Yᵇᵀ R⁻¹`.
    pub gain: DMatrix<f64>,
    /// `v - ȳᵇ`.
    pub innovation: DVector<f64>,
}

/// ETKF with a linear observation operator.
pub fn etkf_analysis<R: Rng + ?Sized>(
    ens: &Ensemble,
    v: &DVector<f64>,
    obs: &LinearObs,
    additive_q: Option<&DMatrix<f64>>,
    opts: &EtkfOptions,
    rng: &mut R,
) -> Result<EtkfAnalysis> {
    etkf_analysis_with(ens, v, |x| &obs.h * x, obs, additive_q, opts, rng)
}

/// ETKF with a member-wise observation function `h`; `obs.r` supplies R.
/// Additive Q draws are added to the members before the transform.
pub fn etkf_analysis_with<H, R>(
    ens: &Ensemble,
    v: &DVector<f64>,
    h: H,
    obs: &LinearObs,
    additive_q: Option<&DMatrix<f64>>,
    opts: &EtkfOptions,
    rng: &mut R,
) -> Result<EtkfAnalysis>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
    R: Rng + ?Sized,
{
    let (d, k) = (ens.dim(), ens.k());
    let mut members = ens.members.clone();
    if let Some(q) = additive_q {
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::Domain(format!("additive Q must be {d}x{d}")));
        }
        let l = psd_sqrt(q);
        for j in 0..k {
            let draw = sample_with_factor(rng, &l);
            let mut c = members.column_mut(j);
            c += draw;
        }
    }
    let mut forecast = Ensemble::new(members)?;
    let xb_mean = forecast.mean();
    let mut xb = forecast.perturbations();
    if opts.inflation != 1.0 {
        xb *= opts.inflation.sqrt();
        for j in 0..k {
            forecast.members.set_column(j, &(&xb_mean + xb.column(j)));
        }
    }
    if xb.amax() == 0.0 {
        return Err(Error::DegenerateEnsemble("forecast perturbations vanish".into()));
    }
    let m = obs.obs_dim();
    let mut y = DMatrix::zeros(m, k);
    for j in 0..k {
        let yj = h(&forecast.members.column(j).into_owned());
        if yj.len() != m || v.len() != m {
            return Err(Error::Domain(format!(
                "observation dimension {} does not match R ({m})",
                yj.len()
            )));
        }
        y.set_column(j, &yj);
    }
    let y_mean = y.column_mean();
    for mut c in y.column_iter_mut() {
        c -= &y_mean;
    }
    // C = Ybᵀ R⁻¹
    let c = obs.r_solve(&y).transpose();
    let mut a = &c * &y;
    for i in 0..k {
        a[(i, i)] += k as f64 - 1.0;
    }
    symmetrize(&mut a);
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    let vecs = &eig.eigenvectors;
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| ((k as f64 - 1.0) / l).sqrt()));
    let pa = vecs * inv * vecs.transpose();
    let wa = vecs * inv_sqrt * vecs.transpose();
    let innovation = v - &y_mean;
    let pac = &pa * &c;
    let w_mean = &pac * &innovation;
    let xa_mean = &xb_mean + &xb * w_mean;
    let mut xa = &xb * wa;
    for mut col in xa.column_iter_mut() {
        col += &xa_mean;
    }
    let gain = &xb * pac;
    Ok(EtkfAnalysis {
        ensemble: Ensemble::new(xa)?,
        forecast,
        gain,
        innovation,
    })
}

/// Dynamics assumed for augmented parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamModel {
    /// `dθ/dt = 0`
    Persistence,
    /// `dθ = σ dW`
    White { sigma: f64 },
}

/// State `(x, θ)` with `dx/dt = f(x, θ)` and θ following a [`ParamModel`].
pub struct Augmented<F> {
    pub drift: F,
    pub state_dim: usize,
    pub param_dim: usize,
    pub param_model: ParamModel,
    rk: Rk4,
}

/// Wraps a drift `f(x, θ, out)` into a joint state-parameter system.
pub fn augment_state<F>(drift: F, state_dim: usize, param_dim: usize, param_model: ParamModel) -> Augmented<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    Augmented {
        drift,
        state_dim,
        param_dim,
        param_model,
        rk: Rk4::new(state_dim + param_dim),
    }
}

impl<F> Augmented<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    pub fn dim(&self) -> usize {
        self.state_dim + self.param_dim
    }

    /// Joint drift; the parameter block has zero drift.
    pub fn drift_into(&self, z: &[f64], out: &mut [f64]) {
        let (x, th) = z.split_at(self.state_dim);
        let (ox, oth) = out.split_at_mut(self.state_dim);
        (self.drift)(x, th, ox);
        oth.iter_mut().for_each(|v| *v = 0.0);
    }

    /// One step: RK4 on x with θ frozen, then the parameter increment.
    pub fn step<R: Rng + ?Sized>(&mut self, z: &mut [f64], t: f64, h: f64, rng: &mut R) -> Result<()> {
        let n = self.state_dim;
        let drift = &self.drift;
        let mut f = |_t: f64, s: &[f64], o: &mut [f64]| {
            let (x, th) = s.split_at(n);
            let (ox, oth) = o.split_at_mut(n);
            drift(x, th, ox);
            oth.iter_mut().for_each(|v| *v = 0.0);
        };
        self.rk.step(&mut f, t, h, z)?;
        if let ParamModel::White { sigma } = self.param_model {
            let s = sigma * h.sqrt();
            for v in &mut z[n..] {
                *v += s * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        Ok(())
    }

    /// Linear forecast of a joint belief's parameter block variance:
    /// adds `σ² h` for white parameters.
    pub fn param_variance_growth(&self, h: f64) -> f64 {
        match self.param_model {
            ParamModel::Persistence => 0.0,
            ParamModel::White { sigma } => sigma * sigma * h,
        }
    }
}

/// Block-diagonal joint belief of a state and parameter belief.
pub fn augment_belief(state: &GaussianBelief, param: &GaussianBelief) -> GaussianBelief {
    let (n, p) = (state.dim(), param.dim());
    let mut mean = DVector::zeros(n + p);
    mean.rows_mut(0, n).copy_from(&state.mean);
    mean.rows_mut(n, p).copy_from(&param.mean);
    let mut cov = DMatrix::zeros(n + p, n + p);
    cov.view_mut((0, 0), (n, n)).copy_from(&state.cov);
    cov.view_mut((n, n), (p, p)).copy_from(&param.cov);
    GaussianBelief { mean, cov }
}
