//! Filtering the turbulent SPEKF mode: the SPEKF filter itself (Gaussian
//! closure of a Monte-Carlo prior) and one-dimensional reduced filters with
//! additive and multiplicative noise corrections.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::kalman::{kf_analysis, GaussianBelief, LinearObs};
use crate::linalg::psd_sqrt;
use crate::models::{selection_matrix, simulate_trajectory, Forcing, SimulationOptions, SpekfParams, SystemSpec};
use crate::rng;
use crate::table::ResultTable;
use crate::{Error, Result};

const DIM: usize = 5;
const CHUNK: usize = 1024;

// ---------------------------------------------------------------- SPEKF prior

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorOptions {
    pub n_mc: usize,
    /// Upper bound on the particle time step.
    pub substep: f64,
    /// Brownian increments summed per step. Values above one let a coarse run
    /// share its noise path with a run at `substep / draws_per_step`.
    pub draws_per_step: usize,
}

impl Default for PriorOptions {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            substep: 0.01,
            draws_per_step: 1,
        }
    }
}

struct ParticleStepper {
    h: f64,
    lambda_hat: Complex64,
    e_gamma: f64,
    sd_gamma: f64,
    e_b: Complex64,
    sd_b: f64,
    sd_x: f64,
    draws: usize,
}

impl ParticleStepper {
    fn new(p: &SpekfParams, h: f64, draws: usize) -> Self {
        let a = p.d_gamma / p.eps;
        let ab = p.gamma_b / p.eps;
        let ou_sd = |sigma: f64, rate: f64| sigma * ((1.0 - (-2.0 * rate * h).exp()) / (2.0 * rate)).sqrt();
        Self {
            h,
            lambda_hat: p.lambda_hat(),
            e_gamma: (-a * h).exp(),
            sd_gamma: ou_sd(p.sigma_gamma / p.eps.sqrt(), a),
            e_b: (-p.lambda_b() / p.eps * h).exp(),
            // complex noise: half the variance on each component
            sd_b: ou_sd(p.sigma_b / p.eps.sqrt(), ab) / 2f64.sqrt(),
            sd_x: p.sigma_x * (h / 2.0).sqrt(),
            draws,
        }
    }

    /// Exact OU updates for `b̃` and `γ̃`; exponential integrator for `x` with
    /// the trapezoidal damping and midpoint forcing over the step.
    fn step<R: Rng + ?Sized>(&self, s: &mut [f64; DIM], f_mid: Complex64, rng: &mut R) {
        let mut xi = [0.0; DIM];
        for _ in 0..self.draws {
            for v in xi.iter_mut() {
                *v += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let norm = 1.0 / (self.draws as f64).sqrt();
        let gamma0 = s[4];
        let b0 = Complex64::new(s[2], s[3]);
        let gamma1 = self.e_gamma * gamma0 + self.sd_gamma * xi[0] * norm;
        let b1 = self.e_b * b0 + self.sd_b * norm * Complex64::new(xi[1], xi[2]);
        let x0 = Complex64::new(s[0], s[1]);
        let damp = (-(0.5 * (gamma0 + gamma1) + self.lambda_hat) * self.h).exp();
        let x1 = damp * x0 + self.h * (0.5 * (b0 + b1) + f_mid) + self.sd_x * norm * Complex64::new(xi[3], xi[4]);
        *s = [x1.re, x1.im, b1.re, b1.im, gamma1];
    }
}

#[derive(Clone)]
struct MomentSums {
    n: usize,
    s1: DVector<f64>,
    s2: DMatrix<f64>,
}

impl MomentSums {
    fn new() -> Self {
        Self {
            n: 0,
            s1: DVector::zeros(DIM),
            s2: DMatrix::zeros(DIM, DIM),
        }
    }
}

/// Gaussian-closure prior: first two moments of the time-`dt` flow of the
/// SPEKF system started from `belief` over `[re x, im x, re b̃, im b̃, γ̃]`.
pub fn spekf_prior<R: RngCore + ?Sized>(
    belief: &GaussianBelief,
    t0: f64,
    dt: f64,
    params: &SpekfParams,
    opts: &PriorOptions,
    rng: &mut R,
) -> Result<GaussianBelief> {
    params.validate()?;
    if belief.dim() != DIM {
        return Err(Error::Domain(format!("SPEKF belief must have dimension 5, got {}", belief.dim())));
    }
    if opts.n_mc < 10_000 {
        return Err(Error::Config(format!("n_mc must be >= 1e4, got {}", opts.n_mc)));
    }
    if !(dt > 0.0) || !(opts.substep > 0.0) || opts.draws_per_step == 0 {
        return Err(Error::Config("dt, substep and draws_per_step must be positive".into()));
    }
    let n_steps = (dt / opts.substep).ceil().max(1.0) as usize;
    let h = dt / n_steps as f64;
    let stepper = ParticleStepper::new(params, h, opts.draws_per_step);
    let factor = psd_sqrt(&belief.cov);
    let centre = belief.mean.clone();
    let seed = rng.next_u64();
    let n_chunks = opts.n_mc.div_ceil(CHUNK);
    let forcing: Vec<Complex64> = (0..n_steps).map(|k| params.forcing.at(t0 + (k as f64 + 0.5) * h)).collect();

    let sums = exec::try_map_indexed(n_chunks, |c| {
        let mut g = rng::stream(seed, "spekf_prior", c as u64);
        let count = CHUNK.min(opts.n_mc - c * CHUNK);
        let mut acc = MomentSums::new();
        for _ in 0..count {
            let z = DVector::from_fn(DIM, |_, _| g.sample::<f64, _>(StandardNormal));
            let start = &centre + &factor * z;
            let mut s = [start[0], start[1], start[2], start[3], start[4]];
            for f in &forcing {
                stepper.step(&mut s, *f, &mut g);
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Blowup { time: t0 + dt });
            }
            let d = DVector::from_fn(DIM, |i, _| s[i] - centre[i]);
            acc.s2.ger(1.0, &d, &d, 1.0);
            acc.s1 += d;
            acc.n += 1;
        }
        Ok(acc)
    })?;
    let total = sums.into_iter().fold(MomentSums::new(), |mut a, b| {
        a.n += b.n;
        a.s1 += b.s1;
        a.s2 += b.s2;
        a
    });
    let n = total.n as f64;
    let shift = &total.s1 / n;
    let mut cov = (&total.s2 - &shift * shift.transpose() * n) / (n - 1.0);
    crate::linalg::symmetrize(&mut cov);
    GaussianBelief::new(centre + shift, cov)
}

// ---------------------------------------------------------------- reduced models

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedSpekfVariant {
    Rsf,
    Rsfa,
    Rspekf,
    Rsfc,
}

impl ReducedSpekfVariant {
    pub const ALL: [ReducedSpekfVariant; 4] = [
        ReducedSpekfVariant::Rsf,
        ReducedSpekfVariant::Rsfa,
        ReducedSpekfVariant::Rspekf,
        ReducedSpekfVariant::Rsfc,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ReducedSpekfVariant::Rsf => "rsf",
            ReducedSpekfVariant::Rsfa => "rsfa",
            ReducedSpekfVariant::Rspekf => "rspekf",
            ReducedSpekfVariant::Rsfc => "rsfc",
        }
    }
}

/// `dx = (−λ x + f) dt + σx dWx + additive dWb − multiplicative x ∘ dWγ`
/// with complex `Wx`, `Wb` (unit total variance rate) and real `Wγ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedSpekfModel {
    pub variant: ReducedSpekfVariant,
    pub lambda: Complex64,
    pub sigma_x: f64,
    pub additive: f64,
    pub multiplicative: f64,
    pub forcing: Forcing,
}

/// Denominator of the RSPEKF additive amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditiveForm {
    /// `√ε σb / √|λb(λb + ελ̂)|`: reduces to the RSFA amplitude as ε → 0 and
    /// reproduces the stationary variance forced by the fast `b̃` for ω = 0.
    #[default]
    Matched,
    /// `√ε σb / |λb(λb + ελ̂)|`.
    Squared,
}

pub fn reduced_spekf_coeffs(p: &SpekfParams, variant: ReducedSpekfVariant) -> Result<ReducedSpekfModel> {
    reduced_spekf_coeffs_with(p, variant, AdditiveForm::Matched)
}

pub fn reduced_spekf_coeffs_with(
    p: &SpekfParams,
    variant: ReducedSpekfVariant,
    form: AdditiveForm,
) -> Result<ReducedSpekfModel> {
    p.validate()?;
    let lh = p.lambda_hat();
    let lb = p.lambda_b();
    let re = p.eps.sqrt();
    let (additive, multiplicative) = match variant {
        ReducedSpekfVariant::Rsf => (0.0, 0.0),
        ReducedSpekfVariant::Rsfa => (re * p.sigma_b / lb.norm(), 0.0),
        ReducedSpekfVariant::Rspekf => (
            match form {
                AdditiveForm::Matched => re * p.sigma_b / (lb * (lb + p.eps * lh)).norm().sqrt(),
                AdditiveForm::Squared => re * p.sigma_b / (lb * (lb + p.eps * lh)).norm(),
            },
            re * p.sigma_gamma / (p.d_gamma * (p.d_gamma + p.eps * p.gamma_hat)).sqrt(),
        ),
        ReducedSpekfVariant::Rsfc => (re * p.sigma_b / lb.norm(), re * p.sigma_gamma / p.d_gamma),
    };
    Ok(ReducedSpekfModel {
        variant,
        lambda: lh,
        sigma_x: p.sigma_x,
        additive,
        multiplicative,
        forcing: p.forcing,
    })
}

/// Mean and second moment `S = E|x|²` of a reduced model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexMoments {
    pub mean: Complex64,
    pub second: f64,
}

impl ComplexMoments {
    pub fn from_mean_var(mean: Complex64, var: f64) -> Self {
        Self {
            mean,
            second: var + mean.norm_sqr(),
        }
    }

    /// `E|x − m|²`
    pub fn var(&self) -> f64 {
        self.second - self.mean.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Stratonovich Heun predictor-corrector.
    Heun,
    /// Euler–Maruyama on the Itô form (with the `c²/2` drift correction).
    ItoEuler,
}

impl ReducedSpekfModel {
    fn ito_drift_rate(&self) -> Complex64 {
        -self.lambda + 0.5 * self.multiplicative * self.multiplicative
    }

    fn moment_rhs(&self, t: f64, m: Complex64, s: f64) -> (Complex64, f64) {
        let f = self.forcing.at(t);
        let c2 = self.multiplicative * self.multiplicative;
        let dm = self.ito_drift_rate() * m + f;
        let ds = (-2.0 * self.lambda.re + 2.0 * c2) * s
            + 2.0 * (f.conj() * m).re
            + self.sigma_x * self.sigma_x
            + self.additive * self.additive;
        (dm, ds)
    }

    /// Propagates the exact Itô moment equations over `dt` (RK4, step ≤ 0.005).
    pub fn propagate_moments(&self, m0: ComplexMoments, t0: f64, dt: f64) -> Result<ComplexMoments> {
        let n = (dt / 0.005).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let (mut m, mut s) = (m0.mean, m0.second);
        for k in 0..n {
            let t = t0 + k as f64 * h;
            let (a1, b1) = self.moment_rhs(t, m, s);
            let (a2, b2) = self.moment_rhs(t + 0.5 * h, m + 0.5 * h * a1, s + 0.5 * h * b1);
            let (a3, b3) = self.moment_rhs(t + 0.5 * h, m + 0.5 * h * a2, s + 0.5 * h * b2);
            let (a4, b4) = self.moment_rhs(t + h, m + h * a3, s + h * b3);
            m += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            s += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            if !m.is_finite() || !s.is_finite() {
                return Err(Error::Blowup { time: t + h });
            }
        }
        Ok(ComplexMoments { mean: m, second: s })
    }

    /// Monte-Carlo moments over `dt` from a circular Gaussian start, for
    /// checking the moment equations and the Stratonovich correction.
    #[allow(clippy::too_many_arguments)]
    pub fn mc_moments(
        &self,
        m0: ComplexMoments,
        t0: f64,
        dt: f64,
        n: usize,
        h: f64,
        scheme: Scheme,
        seed: u64,
    ) -> Result<ComplexMoments> {
        let steps = (dt / h).round().max(1.0) as usize;
        let h = dt / steps as f64;
        let sd0 = (m0.var().max(0.0) / 2.0).sqrt();
        let amp = (self.sigma_x * self.sigma_x + self.additive * self.additive).sqrt();
        let c = self.multiplicative;
        let n_chunks = n.div_ceil(CHUNK);
        let parts = exec::try_map_indexed(n_chunks, |ci| {
            let mut g = rng::stream(seed, "reduced_mc", ci as u64);
            let count = CHUNK.min(n - ci * CHUNK);
            let (mut s1, mut s2) = (Complex64::new(0.0, 0.0), 0.0);
            let mut normal = || g.sample::<f64, _>(StandardNormal);
            for _ in 0..count {
                let mut x = m0.mean + sd0 * Complex64::new(normal(), normal());
                for k in 0..steps {
                    let t = t0 + k as f64 * h;
                    let dw = amp * (h / 2.0).sqrt() * Complex64::new(normal(), normal());
                    let dg = h.sqrt() * normal();
                    let drift = |x: Complex64, t: f64| -self.lambda * x + self.forcing.at(t);
                    x = match scheme {
                        Scheme::ItoEuler => x + (drift(x, t) + 0.5 * c * c * x) * h + dw - c * x * dg,
                        Scheme::Heun => {
                            let pred = x + drift(x, t) * h + dw - c * x * dg;
                            x + 0.5 * (drift(x, t) + drift(pred, t + h)) * h + dw - 0.5 * c * (x + pred) * dg
                        }
                    };
                }
                if !x.is_finite() {
                    return Err(Error::Blowup { time: t0 + dt });
                }
                s1 += x;
                s2 += x.norm_sqr();
            }
            Ok((s1, s2, count))
        })?;
        let (s1, s2, cnt) = parts
            .into_iter()
            .fold((Complex64::new(0.0, 0.0), 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        Ok(ComplexMoments {
            mean: s1 / cnt as f64,
            second: s2 / cnt as f64,
        })
    }
}

/// Scalar complex Kalman update with `E|η|² = r`.
pub fn complex_kf_analysis(prior: ComplexMoments, v: Complex64, r: f64) -> ComplexMoments {
    let p = prior.var();
    let k = p / (p + r);
    ComplexMoments::from_mean_var(prior.mean + k * (v - prior.mean), (1.0 - k) * p)
}

// ---------------------------------------------------------------- experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpekfConfig {
    pub model: SpekfParams,
    pub dt_obs: f64,
    pub cycles: usize,
    /// R as a fraction of the measured `Var(u)`.
    pub r_fraction: f64,
    pub n_mc: usize,
    pub mc_substep: f64,
    /// Euler–Maruyama step of the truth.
    pub truth_h: f64,
    pub spinup: f64,
    /// Length of the separate truth run used to measure `Var(u)`.
    pub var_run_length: f64,
    pub rspekf_additive: AdditiveForm,
}

impl Default for SpekfConfig {
    fn default() -> Self {
        Self {
            model: SpekfParams::default(),
            dt_obs: 0.5,
            cycles: 2000,
            r_fraction: 0.5,
            n_mc: 10_000,
            mc_substep: 0.01,
            truth_h: 1e-3,
            spinup: 50.0,
            var_run_length: 10_000.0,
            rspekf_additive: AdditiveForm::Matched,
        }
    }
}

impl SpekfConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.dt_obs > 0.0) || !(self.r_fraction > 0.0) || !(self.mc_substep > 0.0) {
            return Err(Error::Config("dt_obs, r_fraction and mc_substep must be > 0".into()));
        }
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        if self.n_mc < 10_000 {
            return Err(Error::Config(format!("n_mc must be >= 1e4, got {}", self.n_mc)));
        }
        let ratio = self.dt_obs / self.truth_h;
        if !(self.truth_h > 0.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::Config("dt_obs must be a multiple of truth_h".into()));
        }
        if !(self.var_run_length > 0.0) || self.spinup < 0.0 {
            return Err(Error::Config("var_run_length must be > 0 and spinup >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub label: &'static str,
    pub rmse: f64,
    pub mean_pvar: f64,
}

#[derive(Debug, Clone)]
pub struct SpekfRun {
    pub var_u: f64,
    pub r: f64,
    /// SPEKF first, then [`ReducedSpekfVariant::ALL`], then the raw observations.
    pub summary: Vec<FilterSummary>,
    pub cycles: ResultTable,
    pub table: ResultTable,
    /// One row: the four compared RMSEs and the `√R` baseline.
    pub rmse_table: ResultTable,
}

impl SpekfRun {
    pub fn rmse(&self, label: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.label == label).map(|s| s.rmse)
    }
}

/// `E|x − E x|²` of the observed mode from a long stationary run.
pub fn measure_var_u(cfg: &SpekfConfig, seed: u64) -> Result<f64> {
    let spec = SystemSpec::Spekf(cfg.model);
    let mut g = rng::stream(seed, "spekf_var", 0);
    let sub = (0.1 / cfg.truth_h).round().max(1.0) as usize;
    let traj = simulate_trajectory(
        &spec,
        &[0.0; DIM],
        cfg.var_run_length,
        SimulationOptions {
            h: cfg.truth_h,
            subsample: sub,
            spinup: cfg.spinup,
        },
        &mut g,
    )?;
    let re = traj.component(0);
    let im = traj.component(1);
    Ok(crate::diagnostics::variance(&re) + crate::diagnostics::variance(&im))
}

pub fn run_spekf_experiment(cfg: &SpekfConfig, seed: u64) -> Result<SpekfRun> {
    cfg.validate()?;
    let p = cfg.model;
    let var_u = measure_var_u(cfg, seed)?;
    let r = cfg.r_fraction * var_u;

    let spec = SystemSpec::Spekf(p);
    let stride = (cfg.dt_obs / cfg.truth_h).round() as usize;
    let mut g_truth = rng::stream(seed, "spekf_truth", 0);
    let truth = simulate_trajectory(
        &spec,
        &[0.0; DIM],
        cfg.dt_obs * cfg.cycles as f64,
        SimulationOptions {
            h: cfg.truth_h,
            subsample: stride,
            spinup: cfg.spinup,
        },
        &mut g_truth,
    )?;
    let mut g_obs = rng::stream(seed, "spekf_obs", 0);
    let sd_obs = (r / 2.0).sqrt();
    let obs: Vec<Complex64> = (1..=cfg.cycles)
        .map(|m| {
            let s = &truth.states[m];
            Complex64::new(
                s[0] + sd_obs * g_obs.sample::<f64, _>(StandardNormal),
                s[1] + sd_obs * g_obs.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();

    // SPEKF: climatological start
    let var_b = p.sigma_b * p.sigma_b / (2.0 * p.gamma_b);
    let var_g = p.sigma_gamma * p.sigma_gamma / (2.0 * p.d_gamma);
    let mut belief = GaussianBelief::new(
        DVector::zeros(DIM),
        DMatrix::from_diagonal(&DVector::from_vec(vec![var_u / 2.0, var_u / 2.0, var_b / 2.0, var_b / 2.0, var_g])),
    )?;
    let lin = LinearObs::new(selection_matrix(DIM, &[0, 1]), DMatrix::identity(2, 2) * (r / 2.0))?;
    let prior_opts = PriorOptions {
        n_mc: cfg.n_mc,
        substep: cfg.mc_substep,
        draws_per_step: 1,
    };
    let mut g_mc = rng::stream(seed, "spekf_mc", 0);

    let reduced: Vec<ReducedSpekfModel> =
        ReducedSpekfVariant::ALL
        .iter()
        .map(|v| reduced_spekf_coeffs_with(&p, *v, cfg.rspekf_additive))
        .collect::<Result<_>>()?;
    let mut rbel = vec![ComplexMoments::from_mean_var(Complex64::new(0.0, 0.0), var_u); reduced.len()];

    let mut columns = vec!["m".to_string(), "truth_re".into(), "truth_im".into()];
    let mut labels = vec!["spekf"];
    labels.extend(ReducedSpekfVariant::ALL.iter().map(|v| v.label()));
    for l in &labels {
        columns.push(format!("mean_{l}_re"));
        columns.push(format!("mean_{l}_im"));
        columns.push(format!("pvar_{l}"));
    }
    let mut cycles = ResultTable::with_columns("ex5_cycles", columns);
    let mut se = vec![0.0; labels.len() + 1];
    let mut pv = vec![0.0; labels.len()];

    for (m, v) in obs.iter().enumerate() {
        let t0 = m as f64 * cfg.dt_obs;
        let prior = spekf_prior(&belief, t0, cfg.dt_obs, &p, &prior_opts, &mut g_mc)?;
        belief = kf_analysis(&prior, &DVector::from_vec(vec![v.re, v.im]), &lin)?;
        for (k, model) in reduced.iter().enumerate() {
            let pr = model.propagate_moments(rbel[k], t0, cfg.dt_obs)?;
            rbel[k] = complex_kf_analysis(pr, *v, r);
        }

        let s = &truth.states[m + 1];
        let x = Complex64::new(s[0], s[1]);
        let mut row = vec![(m + 1) as f64, x.re, x.im];
        let mut est = vec![(Complex64::new(belief.mean[0], belief.mean[1]), belief.cov[(0, 0)] + belief.cov[(1, 1)])];
        est.extend(rbel.iter().map(|b| (b.mean, b.var())));
        for (k, (mean, var)) in est.iter().enumerate() {
            se[k] += (mean - x).norm_sqr();
            pv[k] += var;
            row.extend([mean.re, mean.im, *var]);
        }
        se[labels.len()] += (v - x).norm_sqr();
        cycles.push(row)?;
    }

    let n = cfg.cycles as f64;
    let mut summary: Vec<FilterSummary> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| FilterSummary {
            label: l,
            rmse: (se[k] / n).sqrt(),
            mean_pvar: pv[k] / n,
        })
        .collect();
    summary.push(FilterSummary {
        label: "observation",
        rmse: (se[labels.len()] / n).sqrt(),
        mean_pvar: r,
    });
    let mut table = ResultTable::labeled("ex5_summary", "variant", &["rmse", "mean_pvar", "var_u", "r"]);
    for s in &summary {
        table.push_labeled(s.label, vec![s.rmse, s.mean_pvar, var_u, r])?;
    }
    let mut rmse_table = ResultTable::new(
        "ex5_rmse",
        &["rmse_spekf", "rmse_rspekf", "rmse_rsfa", "rmse_rsf", "sqrt_r"],
    );
    let pick = |l: &str| summary.iter().find(|s| s.label == l).map_or(f64::NAN, |s| s.rmse);
    rmse_table.push(vec![pick("spekf"), pick("rspekf"), pick("rsfa"), pick("rsf"), r.sqrt()])?;
    Ok(SpekfRun {
        var_u,
        r,
        summary,
        cycles,
        table,
        rmse_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coefficient_examples() {
        let p = SpekfParams::default();
        let m = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rspekf).unwrap();
        assert_relative_eq!(m.multiplicative, 20.0 / (20.0f64 * 21.2).sqrt(), epsilon = 1e-12);
        assert!((m.multiplicative - 0.9713).abs() < 1e-4);
        let c = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rsfc).unwrap();
        assert_relative_eq!(c.multiplicative, 1.0);
        assert_relative_eq!(c.additive, 1.0);
        let a = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rsfa).unwrap();
        assert_relative_eq!(a.additive, 1.0);
        assert_eq!(a.multiplicative, 0.0);
        // |λb (λb + ελ̂)| = 0.5 · 1.7
        assert_relative_eq!(m.additive, 0.5 / 0.85f64.sqrt(), epsilon = 1e-12);
        let sq = reduced_spekf_coeffs_with(&p, ReducedSpekfVariant::Rspekf, AdditiveForm::Squared).unwrap();
        assert_relative_eq!(sq.additive, 0.5 / 0.85, epsilon = 1e-12);
    }

    #[test]
    fn rspekf_approaches_rsfc_for_small_eps_gamma_ratio() {
        let p = SpekfParams {
            eps: 0.001,
            ..SpekfParams::default()
        };
        assert!(p.eps * p.gamma_hat / p.d_gamma < 0.01);
        assert!(p.eps * p.gamma_hat / p.gamma_b < 0.01);
        let a = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rspekf).unwrap();
        let c = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rsfc).unwrap();
        assert!((a.multiplicative - c.multiplicative).abs() / c.multiplicative < 0.01);
        assert!((a.additive - c.additive).abs() / c.additive < 0.01);
    }

    #[test]
    fn matched_additive_amplitude_reproduces_forced_variance() {
        // real case: x' = −γ̂x + b̃ with fast OU b̃; stationary Var(x) against
        // the white-noise replacement of amplitude s: s² / (2γ̂)
        let p = SpekfParams {
            sigma_x: 0.0,
            sigma_gamma: 0.0,
            eps: 0.3,
            ..SpekfParams::default()
        };
        let (g, a, q) = (p.gamma_hat, p.gamma_b / p.eps, p.sigma_b * p.sigma_b / p.eps);
        // Lyapunov for [[-g, 1], [0, -a]] with diffusion diag(0, q)
        let var_b = q / (2.0 * a);
        let cov_xb = var_b / (g + a);
        let var_x = cov_xb / g;
        let s = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rspekf).unwrap().additive;
        assert_relative_eq!(s * s / (2.0 * g), var_x, max_relative = 1e-12);
    }

    #[test]
    fn without_multiplicative_channel_rspekf_tends_to_rsfa() {
        for eps in [1.0, 0.1, 0.01, 0.001] {
            let p = SpekfParams {
                sigma_gamma: 0.0,
                eps,
                ..SpekfParams::default()
            };
            let a = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rspekf).unwrap();
            let b = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rsfa).unwrap();
            assert_eq!(a.multiplicative, 0.0);
            let ratio = (p.lambda_b().norm() / (p.lambda_b() + eps * p.lambda_hat()).norm()).sqrt();
            assert_relative_eq!(a.additive / b.additive, ratio, epsilon = 1e-12);
            if eps <= 0.001 {
                assert!((a.additive - b.additive).abs() / b.additive < 0.002);
            }
        }
    }

    #[test]
    fn deterministic_prior_decays() {
        let p = SpekfParams {
            sigma_x: 0.0,
            sigma_b: 0.0,
            sigma_gamma: 0.0,
            omega: 1.5,
            ..SpekfParams::default()
        };
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, -0.5, 0.0, 0.0, 0.0]), DMatrix::zeros(5, 5)).unwrap();
        let mut g = rng::stream(1, "t", 0);
        let out = spekf_prior(&b, 0.0, 0.5, &p, &PriorOptions::default(), &mut g).unwrap();
        let expect = Complex64::new(1.0, -0.5) * (-p.lambda_hat() * 0.5).exp();
        assert_relative_eq!(out.mean[0], expect.re, epsilon = 1e-12);
        assert_relative_eq!(out.mean[1], expect.im, epsilon = 1e-12);
        assert!(out.cov.amax() < 1e-10);
    }

    #[test]
    fn prior_keeps_stationary_marginals() {
        let p = SpekfParams::default();
        let vb = p.sigma_b * p.sigma_b / (2.0 * p.gamma_b);
        let vg = p.sigma_gamma * p.sigma_gamma / (2.0 * p.d_gamma);
        assert_relative_eq!(vg, 10.0);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, vb / 2.0, vb / 2.0, vg]));
        let b = GaussianBelief::new(DVector::zeros(5), cov).unwrap();
        let mut g = rng::stream(2, "t", 0);
        let opts = PriorOptions {
            n_mc: 40_000,
            ..Default::default()
        };
        let out = spekf_prior(&b, 0.0, 0.5, &p, &opts, &mut g).unwrap();
        assert!((out.cov[(4, 4)] - vg).abs() / vg < 0.03);
        assert!((out.cov[(2, 2)] + out.cov[(3, 3)] - vb).abs() / vb < 0.03);
    }

    #[test]
    fn halving_the_step_moves_moments_below_one_percent() {
        let p = SpekfParams::default();
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.125, 0.125, 10.0]));
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 0.5, 0.0, 0.0, 0.0]), cov).unwrap();
        let run = |substep: f64, draws: usize| {
            let mut g = rng::stream(3, "t", 0);
            let opts = PriorOptions {
                n_mc: 20_000,
                substep,
                draws_per_step: draws,
            };
            spekf_prior(&b, 0.0, 0.5, &p, &opts, &mut g).unwrap()
        };
        let coarse = run(0.01, 2);
        let fine = run(0.005, 1);
        let var = |b: &GaussianBelief| b.cov[(0, 0)] + b.cov[(1, 1)];
        assert!((var(&coarse) - var(&fine)).abs() / var(&fine) < 0.01);
        let mc = Complex64::new(coarse.mean[0], coarse.mean[1]);
        let mf = Complex64::new(fine.mean[0], fine.mean[1]);
        assert!((mc - mf).norm() / mf.norm() < 0.01);
    }

    #[test]
    fn additive_moments_match_ou_formulas() {
        let p = SpekfParams {
            omega: 0.7,
            ..SpekfParams::default()
        };
        let m = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rsfa).unwrap();
        let m0 = ComplexMoments::from_mean_var(Complex64::new(1.0, 2.0), 0.3);
        let out = m.propagate_moments(m0, 0.0, 0.5).unwrap();
        let decay = (-p.lambda_hat() * 0.5).exp();
        let q = (p.sigma_x.powi(2) + m.additive.powi(2)) / (2.0 * p.gamma_hat) * (1.0 - (-2.0 * p.gamma_hat * 0.5).exp());
        assert_relative_eq!(out.mean.re, (m0.mean * decay).re, epsilon = 1e-8);
        assert_relative_eq!(out.mean.im, (m0.mean * decay).im, epsilon = 1e-8);
        assert_relative_eq!(out.var(), decay.norm_sqr() * 0.3 + q, epsilon = 1e-8);
    }

    #[test]
    fn heun_and_corrected_euler_agree_with_moment_equations() {
        let p = SpekfParams::default();
        let m = reduced_spekf_coeffs(&p, ReducedSpekfVariant::Rspekf).unwrap();
        let m0 = ComplexMoments::from_mean_var(Complex64::new(2.0, 0.0), 0.5);
        let exact = m.propagate_moments(m0, 0.0, 0.5).unwrap();
        let heun = m.mc_moments(m0, 0.0, 0.5, 200_000, 0.005, Scheme::Heun, 4).unwrap();
        let ito = m.mc_moments(m0, 0.0, 0.5, 200_000, 0.005, Scheme::ItoEuler, 4).unwrap();
        for mc in [heun, ito] {
            assert!((mc.mean - exact.mean).norm() / exact.mean.norm() < 0.01);
            assert!((mc.second - exact.second).abs() / exact.second < 0.01);
        }
        // without the correction the mean decays at γ̂ rather than γ̂ − c²/2
        let plain = (-p.lambda_hat() * 0.5).exp() * m0.mean;
        assert!((plain - exact.mean).norm() / exact.mean.norm() > 0.1);
    }

    #[test]
    fn reduced_models_are_mean_reverting() {
        let p = SpekfParams::default();
        for v in ReducedSpekfVariant::ALL {
            let m = reduced_spekf_coeffs(&p, v).unwrap();
            let mut s = ComplexMoments::from_mean_var(Complex64::new(3.0, -1.0), 0.0);
            let mut last = s.mean.norm();
            for k in 0..10 {
                s = m.propagate_moments(s, k as f64, 1.0).unwrap();
                assert!(s.mean.norm() < last);
                last = s.mean.norm();
            }
        }
    }

    #[test]
    fn complex_update_shrinks_variance() {
        let prior = ComplexMoments::from_mean_var(Complex64::new(1.0, 1.0), 2.0);
        let post = complex_kf_analysis(prior, Complex64::new(0.0, 0.0), 2.0);
        assert_relative_eq!(post.var(), 1.0);
        assert_relative_eq!(post.mean.re, 0.5);
    }

    #[test]
    fn short_experiment_runs() {
        let cfg = SpekfConfig {
            cycles: 20,
            var_run_length: 200.0,
            ..Default::default()
        };
        let run = run_spekf_experiment(&cfg, 9).unwrap();
        assert_eq!(run.cycles.rows().len(), 20);
        assert!(run.var_u > 0.0);
        for s in &run.summary {
            assert!(s.rmse.is_finite() && s.mean_pvar > 0.0);
        }
    }
}
