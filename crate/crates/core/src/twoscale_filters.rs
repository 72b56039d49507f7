//! Filters for the partially observed linear two-scale system: the exact 2D
//! Kalman filter and three one-dimensional reduced filters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::kalman::{kf_analysis, kf_forecast, GaussianBelief, LinearObs};
use crate::linalg::{discretize_linear_sde, psd_sqrt};
use crate::models::LinearTwoScaleParams;
use crate::rng;
use crate::table::ResultTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedVariant {
    Rsf,
    Rsfa,
    Opt,
}

impl ReducedVariant {
    pub const ALL: [ReducedVariant; 3] = [ReducedVariant::Rsf, ReducedVariant::Rsfa, ReducedVariant::Opt];

    pub fn label(&self) -> &'static str {
        match self {
            ReducedVariant::Rsf => "rsf",
            ReducedVariant::Rsfa => "rsfa",
            ReducedVariant::Opt => "opt",
        }
    }
}

/// `dx = drift · x dt + Σ_k √v_k dW_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel1D {
    pub variant: ReducedVariant,
    pub drift: f64,
    pub variances: Vec<f64>,
}

impl ReducedModel1D {
    pub fn total_variance(&self) -> f64 {
        self.variances.iter().sum()
    }

    /// Exact discretization `(F, Q)` over `dt`.
    pub fn discretize(&self, dt: f64) -> (f64, f64) {
        let f = (self.drift * dt).exp();
        let q = self.total_variance() / (-2.0 * self.drift) * (1.0 - (2.0 * self.drift * dt).exp());
        (f, q)
    }
}

pub fn reduced_coeffs(p: &LinearTwoScaleParams, variant: ReducedVariant) -> Result<ReducedModel1D> {
    let a_tilde = p.a_tilde();
    if !(a_tilde < 0.0) {
        return Err(Error::Config(format!("reduced drift {a_tilde} must be negative")));
    }
    if p.a22 == 0.0 || p.eps < 0.0 {
        return Err(Error::Config("a22 must be nonzero and eps >= 0".into()));
    }
    let sx2 = p.sigma_x * p.sigma_x;
    let fast = p.eps * p.sigma_y * p.sigma_y * (p.a12 / p.a22).powi(2);
    let (drift, variances) = match variant {
        ReducedVariant::Rsf => (a_tilde, vec![sx2]),
        ReducedVariant::Rsfa => (a_tilde, vec![sx2, fast]),
        ReducedVariant::Opt => {
            let g = 1.0 - p.eps * p.a_hat();
            (a_tilde * g, vec![sx2 * g * g, fast])
        }
    };
    Ok(ReducedModel1D {
        variant,
        drift,
        variances,
    })
}

/// Stationary variance of the slow variable.
pub fn slow_variance(p: &LinearTwoScaleParams) -> Result<f64> {
    crate::models::linear_slow_variance(p)
}

/// Exact transition `(F₂, Q₂)` of the 2D system over `dt`.
pub fn true_transition(p: &LinearTwoScaleParams, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    p.validate()?;
    let a = DMatrix::from_row_slice(2, 2, p.drift_matrix().as_slice()).transpose();
    let d = DMatrix::from_row_slice(2, 2, p.diffusion_matrix().as_slice()).transpose();
    Ok(discretize_linear_sde(&a, &d, dt))
}

/// One forecast/analysis cycle of the exact 2D filter observing `x`.
pub fn true_filter_step(
    belief: &GaussianBelief,
    transition: &(DMatrix<f64>, DMatrix<f64>),
    obs: &LinearObs,
    v: f64,
) -> Result<GaussianBelief> {
    let prior = kf_forecast(belief, &transition.0, &transition.1);
    kf_analysis(&prior, &DVector::from_element(1, v), obs)
}

/// Steady state of a reduced filter run against the exact 2D truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryReduced {
    /// Filter-reported posterior variance.
    pub p_post: f64,
    /// Actual mean square error of the posterior mean.
    pub mse: f64,
}

/// Closed-form steady state of a reduced filter: the scalar Riccati fixed
/// point for the reported variance, and the stationary covariance of
/// `(x, y, x̂)` under the exact truth for the actual error.
pub fn stationary_reduced(p: &LinearTwoScaleParams, variant: ReducedVariant, dt: f64, r: f64) -> Result<StationaryReduced> {
    let (f2, q2) = true_transition(p, dt)?;
    let (f, q) = reduced_coeffs(p, variant)?.discretize(dt);
    let mut pa = q;
    for _ in 0..100_000 {
        let pb = f * f * pa + q;
        let next = pb * r / (pb + r);
        let done = (next - pa).abs() <= 1e-15 * pa;
        pa = next;
        if done {
            break;
        }
    }
    let pb = f * f * pa + q;
    let k = pb / (pb + r);
    let mut t = DMatrix::zeros(3, 3);
    t.view_mut((0, 0), (2, 2)).copy_from(&f2);
    t[(2, 0)] = k * f2[(0, 0)];
    t[(2, 1)] = k * f2[(0, 1)];
    t[(2, 2)] = (1.0 - k) * f;
    let mut n = DMatrix::zeros(3, 3);
    n.view_mut((0, 0), (2, 2)).copy_from(&q2);
    for j in 0..2 {
        n[(2, j)] = k * q2[(0, j)];
        n[(j, 2)] = k * q2[(j, 0)];
    }
    n[(2, 2)] = k * k * (q2[(0, 0)] + r);
    // doubling for C = T C Tᵀ + N
    let mut c = n.clone();
    let mut tp = t;
    for _ in 0..40 {
        c = &tp * &c * tp.transpose() + &c;
        tp = &tp * &tp;
    }
    Ok(StationaryReduced {
        p_post: pa,
        mse: c[(0, 0)] - 2.0 * c[(0, 2)] + c[(2, 2)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoScaleConfig {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub eps_grid: Vec<f64>,
    pub dt_obs: f64,
    /// R as a fraction of the stationary slow variance.
    pub r_fraction: f64,
    pub cycles: usize,
    pub discard: usize,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        let p = LinearTwoScaleParams::default();
        Self {
            a11: p.a11,
            a12: p.a12,
            a21: p.a21,
            a22: p.a22,
            sigma_x: p.sigma_x,
            sigma_y: p.sigma_y,
            eps_grid: vec![0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            dt_obs: 1.0,
            r_fraction: 0.5,
            cycles: 100_000,
            discard: 1_000,
        }
    }
}

impl TwoScaleConfig {
    pub fn params(&self, eps: f64) -> LinearTwoScaleParams {
        LinearTwoScaleParams {
            a11: self.a11,
            a12: self.a12,
            a21: self.a21,
            a22: self.a22,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_grid.is_empty() {
            return Err(Error::Config("eps_grid must not be empty".into()));
        }
        for &e in &self.eps_grid {
            self.params(e).validate()?;
        }
        if !(self.dt_obs > 0.0) || !(self.r_fraction > 0.0) {
            return Err(Error::Config("dt_obs and r_fraction must be > 0".into()));
        }
        if self.discard >= self.cycles {
            return Err(Error::Config(format!(
                "discard ({}) must be smaller than cycles ({})",
                self.discard, self.cycles
            )));
        }
        Ok(())
    }
}

/// Result of one filter at one ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterScore {
    pub mse: f64,
    /// Posterior variance of the slow variable at the last cycle.
    pub p_post: f64,
    /// Sample correlation of the analysis error with the analysis mean.
    pub err_corr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsResult {
    pub eps: f64,
    pub var_x: f64,
    pub truth: FilterScore,
    /// In the order of [`ReducedVariant::ALL`].
    pub reduced: Vec<FilterScore>,
}

struct Accum {
    se: f64,
    ex: f64,
    ee: f64,
    xx: f64,
    n: usize,
}

impl Accum {
    fn new() -> Self {
        Self { se: 0.0, ex: 0.0, ee: 0.0, xx: 0.0, n: 0 }
    }

    fn add(&mut self, est: f64, truth: f64) {
        let e = truth - est;
        self.se += e * e;
        self.ex += e * est;
        self.ee += e * e;
        self.xx += est * est;
        self.n += 1;
    }

    fn score(&self, p_post: f64) -> FilterScore {
        FilterScore {
            mse: self.se / self.n as f64,
            p_post,
            err_corr: self.ex / (self.ee * self.xx).sqrt(),
        }
    }
}

/// Runs all four filters on one exactly sampled truth at a single ε.
pub fn run_eps(cfg: &TwoScaleConfig, eps: f64, seed: u64, index: u64) -> Result<EpsResult> {
    let p = cfg.params(eps);
    p.validate()?;
    let var_x = slow_variance(&p)?;
    let r = cfg.r_fraction * var_x;
    let mut g = rng::stream(seed, "twoscale", index);
    let (f2, q2) = true_transition(&p, cfg.dt_obs)?;
    let l2 = psd_sqrt(&q2);
    let stat = p.stationary_covariance()?;
    let l0 = psd_sqrt(&DMatrix::from_row_slice(2, 2, stat.transpose().as_slice()));

    let mut x = &l0 * DVector::from_fn(2, |_, _| g.sample::<f64, _>(StandardNormal));
    let obs2 = LinearObs::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::from_element(1, 1, r))?;
    let mut belief2 = GaussianBelief::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, stat.transpose().as_slice()))?;
    let transition = (f2.clone(), q2);

    let models: Vec<(f64, f64)> = ReducedVariant::ALL
        .iter()
        .map(|v| reduced_coeffs(&p, *v).map(|m| m.discretize(cfg.dt_obs)))
        .collect::<Result<_>>()?;
    let mut means = vec![0.0; models.len()];
    let mut vars = vec![var_x; models.len()];

    let mut acc_true = Accum::new();
    let mut acc: Vec<Accum> = models.iter().map(|_| Accum::new()).collect();
    for m in 0..cfg.cycles {
        let xi = DVector::from_fn(2, |_, _| g.sample::<f64, _>(StandardNormal));
        x = &f2 * &x + &l2 * xi;
        let v = x[0] + r.sqrt() * g.sample::<f64, _>(StandardNormal);

        belief2 = true_filter_step(&belief2, &transition, &obs2, v)?;
        for (k, &(f, q)) in models.iter().enumerate() {
            let mb = f * means[k];
            let pb = f * f * vars[k] + q;
            let gain = pb / (pb + r);
            means[k] = mb + gain * (v - mb);
            vars[k] = (1.0 - gain) * pb;
        }
        if m >= cfg.discard {
            acc_true.add(belief2.mean[0], x[0]);
            for k in 0..models.len() {
                acc[k].add(means[k], x[0]);
            }
        }
    }
    Ok(EpsResult {
        eps,
        var_x,
        truth: acc_true.score(belief2.cov[(0, 0)]),
        reduced: acc.iter().zip(&vars).map(|(a, &pv)| a.score(pv)).collect(),
    })
}

/// All ε-points in parallel; rows `variant, eps, mse, p_post, var_x`.
pub fn run_twoscale_experiment(cfg: &TwoScaleConfig, seed: u64) -> Result<(Vec<EpsResult>, ResultTable)> {
    cfg.validate()?;
    let results = exec::try_map_indexed(cfg.eps_grid.len(), |i| run_eps(cfg, cfg.eps_grid[i], seed, i as u64))?;
    let mut table = ResultTable::labeled("ex4_filters", "variant", &["eps", "mse", "p_post", "var_x", "err_corr"]);
    for r in &results {
        table.push_labeled("true", vec![r.eps, r.truth.mse, r.truth.p_post, r.var_x, r.truth.err_corr])?;
        for (v, s) in ReducedVariant::ALL.iter().zip(&r.reduced) {
            table.push_labeled(v.label(), vec![r.eps, s.mse, s.p_post, r.var_x, s.err_corr])?;
        }
    }
    Ok((results, table))
}
