//! Semiparametric forecasting: a known parametric model whose parameter
//! evolves with unknown dynamics learned nonparametrically.
//!
//! The parameter series is recovered from observations by an ETKF that treats
//! θ as a random walk with an adaptively estimated drive variance. A diffusion
//! forecast trained on that series then supplies θ samples to each member of
//! the parametric ensemble forecast.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptiveConfig, AdaptiveEstimator, NoiseStructure};
use crate::diagnostics;
use crate::diffusion_forecast::{build_shift_operator, BasisOptions, DiffusionBasis, ShiftOperator};
use crate::exec;
use crate::kalman::{etkf_analysis, Ensemble, EtkfOptions, LinearObs};
use crate::models::{l63_drift_into, selection_matrix, L63Params, Rk4};
use crate::rng;
use crate::table::ResultTable;
use crate::{Error, Result};

// ---------------------------------------------------------------- model

/// `dx_j/dt = θ x_{j+1} x_{j-1} − x_{j-2} x_{j-1} − x_j + F` on a periodic ring.
#[inline]
pub fn l96_advective_drift_into(x: &[f64], theta: f64, forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let p1 = x[(j + 1) % n];
        let m1 = x[(j + n - 1) % n];
        let m2 = x[(j + n - 2) % n];
        out[j] = theta * p1 * m1 - m2 * m1 - x[j] + forcing;
    }
}

/// Lorenz-96 ring whose advection coefficient `θ = x_63/theta_scale + 1`
/// follows a Lorenz-63 system. State: `(x_1..x_n, x_63, y_63, z_63)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoupledParams {
    pub n: usize,
    pub forcing: f64,
    pub l63: L63Params,
    pub theta_scale: f64,
    /// Hold θ at this value instead of driving it.
    pub theta_constant: Option<f64>,
}

impl Default for CoupledParams {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
            l63: L63Params::default(),
            theta_scale: 40.0,
            theta_constant: None,
        }
    }
}

impl CoupledParams {
    pub fn dim(&self) -> usize {
        self.n + 3
    }

    pub fn theta(&self, z: &[f64]) -> f64 {
        self.theta_constant.unwrap_or(z[self.n] / self.theta_scale + 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config("semiparametric model needs n >= 4".into()));
        }
        if !(self.theta_scale > 0.0) || !self.forcing.is_finite() {
            return Err(Error::Config("theta_scale must be > 0 and forcing finite".into()));
        }
        if self.theta_constant.is_some_and(|t| !t.is_finite()) {
            return Err(Error::Config("theta_constant must be finite".into()));
        }
        Ok(())
    }
}

pub fn coupled_drift_into(z: &[f64], p: &CoupledParams, out: &mut [f64]) {
    let n = p.n;
    l96_advective_drift_into(&z[..n], p.theta(z), p.forcing, &mut out[..n]);
    l63_drift_into(&z[n..], &p.l63, &mut out[n..]);
}

fn steps_per(dt: f64, h: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && h > 0.0) {
        return Err(Error::Config("time steps must be > 0".into()));
    }
    let s = (dt / h).round().max(1.0) as usize;
    Ok((s, dt / s as f64))
}

/// Full coupled states sampled every `dt`.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl CoupledRun {
    pub fn theta(&self, p: &CoupledParams) -> Vec<f64> {
        self.states.iter().map(|z| p.theta(z)).collect()
    }

    pub fn slow(&self, p: &CoupledParams) -> Vec<Vec<f64>> {
        self.states.iter().map(|z| z[..p.n].to_vec()).collect()
    }
}

pub fn coupled_run<R: Rng + ?Sized>(
    p: &CoupledParams,
    samples: usize,
    dt: f64,
    h: f64,
    spinup: f64,
    rng: &mut R,
) -> Result<CoupledRun> {
    p.validate()?;
    let (every, hs) = steps_per(dt, h)?;
    let mut z: Vec<f64> = (0..p.n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    z.extend((0..3).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)));
    let mut rk = Rk4::new(z.len());
    let mut f = |_t: f64, s: &[f64], out: &mut [f64]| coupled_drift_into(s, p, out);
    for i in 0..(spinup / hs).round() as usize {
        rk.step(&mut f, i as f64 * hs, hs, &mut z)?;
    }
    let mut states = Vec::with_capacity(samples);
    for m in 0..samples {
        if m > 0 {
            for s in 0..every {
                rk.step(&mut f, ((m - 1) * every + s) as f64 * hs, hs, &mut z)?;
            }
        }
        states.push(z.clone());
    }
    Ok(CoupledRun { dt, states })
}

/// `v_m = x_m + N(0, obs_var I)` on the ring sites.
pub fn observe<R: Rng + ?Sized>(run: &CoupledRun, n: usize, obs_var: f64, rng: &mut R) -> Vec<DVector<f64>> {
    let s = obs_var.sqrt();
    run.states
        .iter()
        .map(|z| DVector::from_fn(n, |i, _| z[i] + s * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn mean_rmse(ens: &Ensemble, truth: &[f64]) -> f64 {
    let m = ens.mean();
    (truth.iter().enumerate().map(|(i, t)| (m[i] - t).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
}

fn initial_ring<R: Rng + ?Sized>(v: &DVector<f64>, obs_var: f64, rng: &mut R) -> Vec<f64> {
    v.iter().map(|x| x + obs_var.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------- filters

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub theta0: f64,
    pub theta_spread: f64,
    /// Initial random-walk variance of θ per cycle.
    pub q0: f64,
    /// Cycles with fixed `(Q, R)` before the secondary filter starts.
    pub warmup: usize,
    pub inflation: f64,
    pub adaptive: AdaptiveConfig,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            theta0: 1.0,
            theta_spread: 0.1,
            q0: 1e-3,
            warmup: 50,
            inflation: 1.0,
            adaptive: AdaptiveConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    /// Posterior-mean θ per cycle.
    pub theta: Vec<f64>,
    pub theta_std: Vec<f64>,
    /// Posterior-mean RMSE of the ring sites against the truth.
    pub rmse: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    /// Analysis ensembles at the requested cycles.
    pub kept: Vec<(usize, Ensemble)>,
}

/// ETKF on `(x, θ)` with `θ` a random walk whose drive variance (and the
/// observation variance) come from the adaptive estimator.
#[allow(clippy::too_many_arguments)]
pub fn extract_parameter_series(
    p: &CoupledParams,
    truth: &CoupledRun,
    obs: &[DVector<f64>],
    obs_var: f64,
    h: f64,
    k: usize,
    cfg: &ExtractionConfig,
    keep: &[usize],
    seed: u64,
) -> Result<Extraction> {
    let n = p.n;
    let d = n + 1;
    let (steps, hs) = steps_per(truth.dt, h)?;
    let mut g = rng::stream(seed, "extract", 0);
    let mut cols = Vec::with_capacity(d * k);
    for _ in 0..k {
        cols.extend(initial_ring(&obs[0], obs_var, &mut g));
        cols.push(cfg.theta0 + cfg.theta_spread * g.sample::<f64, _>(StandardNormal));
    }
    let mut ens = Ensemble::new(DMatrix::from_vec(d, k, cols))?;
    let mut mask = vec![0.0; n];
    mask.push(1.0);
    let sites: Vec<usize> = (0..n).collect();
    let structure = NoiseStructure::masked(selection_matrix(d, &sites), &mask);
    let mut est = AdaptiveEstimator::new(structure, cfg.adaptive, &[cfg.q0, obs_var])?;
    let opts = EtkfOptions {
        inflation: cfg.inflation,
    };
    let mut out = Extraction {
        theta: Vec::with_capacity(obs.len()),
        theta_std: Vec::with_capacity(obs.len()),
        rmse: Vec::with_capacity(obs.len()),
        q: Vec::with_capacity(obs.len()),
        r: Vec::with_capacity(obs.len()),
        kept: Vec::new(),
    };
    let forcing = p.forcing;
    for (m, v) in obs.iter().enumerate() {
        let diverged = |why: String, out: &Extraction| {
            Error::Divergence(format!(
                "extraction filter failed at cycle {m} ({why}); last rmse {:.3}, q {:.3e}, r {:.3}",
                out.rmse.last().copied().unwrap_or(f64::NAN),
                out.q.last().copied().unwrap_or(cfg.q0),
                out.r.last().copied().unwrap_or(obs_var),
            ))
        };
        if m > 0 {
            let step = ens.forecast(|_, z| {
                let mut rk = Rk4::new(d);
                let mut f = |_t: f64, s: &[f64], o: &mut [f64]| {
                    l96_advective_drift_into(&s[..n], s[n], forcing, &mut o[..n]);
                    o[n] = 0.0;
                };
                for s in 0..steps {
                    rk.step(&mut f, ((m - 1) * steps + s) as f64 * hs, hs, z)?;
                }
                Ok(())
            });
            if let Err(e) = step {
                return Err(diverged(e.to_string(), &out));
            }
        }
        let an = if m < cfg.warmup {
            LinearObs::new(est.structure.h.clone(), est.r())
                .and_then(|o| etkf_analysis(&ens, v, &o, Some(&est.q()), &opts, &mut g))
        } else {
            est.assimilate(&ens, v, &opts, &mut g)
        };
        ens = match an {
            Ok(a) => a.ensemble,
            Err(e @ (Error::Singular { .. } | Error::DegenerateEnsemble(_))) => return Err(diverged(e.to_string(), &out)),
            Err(e) => return Err(e),
        };
        let row: Vec<f64> = ens.members.row(n).iter().copied().collect();
        out.theta.push(diagnostics::mean(&row));
        out.theta_std.push(diagnostics::variance(&row).sqrt());
        out.rmse.push(mean_rmse(&ens, &truth.states[m][..n]));
        let np = est.params();
        out.q.push(np.q1);
        out.r.push(np.r);
        if !out.theta.last().unwrap().is_finite() {
            return Err(diverged("non-finite θ estimate".into(), &out));
        }
        if keep.binary_search(&m).is_ok() {
            out.kept.push((m, ens.clone()));
        }
    }
    Ok(out)
}

/// ETKF with the exact coupled model, known R and multiplicative inflation.
#[derive(Debug, Clone)]
pub struct PerfectFilter {
    pub rmse: Vec<f64>,
    pub kept: Vec<(usize, Ensemble)>,
}

#[allow(clippy::too_many_arguments)]
pub fn perfect_model_filter(
    p: &CoupledParams,
    truth: &CoupledRun,
    obs: &[DVector<f64>],
    obs_var: f64,
    h: f64,
    k: usize,
    inflation: f64,
    keep: &[usize],
    seed: u64,
) -> Result<PerfectFilter> {
    let n = p.n;
    let d = p.dim();
    let (steps, hs) = steps_per(truth.dt, h)?;
    let mut g = rng::stream(seed, "perfect_filter", 0);
    let mut cols = Vec::with_capacity(d * k);
    for _ in 0..k {
        cols.extend(initial_ring(&obs[0], obs_var, &mut g));
        cols.extend([0.0, 0.0, 25.0].map(|c| c + 8.0 * g.sample::<f64, _>(StandardNormal)));
    }
    let mut ens = Ensemble::new(DMatrix::from_vec(d, k, cols))?;
    let sites: Vec<usize> = (0..n).collect();
    let lo = LinearObs::new(selection_matrix(d, &sites), DMatrix::identity(n, n) * obs_var)?;
    let opts = EtkfOptions { inflation };
    let mut out = PerfectFilter {
        rmse: Vec::with_capacity(obs.len()),
        kept: Vec::new(),
    };
    for (m, v) in obs.iter().enumerate() {
        if m > 0 {
            ens.forecast(|_, z| {
                let mut rk = Rk4::new(d);
                let mut f = |_t: f64, s: &[f64], o: &mut [f64]| coupled_drift_into(s, p, o);
                for s in 0..steps {
                    rk.step(&mut f, ((m - 1) * steps + s) as f64 * hs, hs, z)?;
                }
                Ok(())
            })
            .map_err(|e| Error::Divergence(format!("perfect-model filter failed at cycle {m}: {e}")))?;
        }
        ens = etkf_analysis(&ens, v, &lo, None, &opts, &mut g)?.ensemble;
        out.rmse.push(mean_rmse(&ens, &truth.states[m][..n]));
        if keep.binary_search(&m).is_ok() {
            out.kept.push((m, ens.clone()));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- coupling

/// Diffusion forecast of θ with the physical box used to guard samples.
#[derive(Debug, Clone)]
pub struct ParamForecastModel {
    pub basis: DiffusionBasis,
    pub operator: ShiftOperator,
    pub tau: f64,
    pub bounds: (f64, f64),
}

impl ParamForecastModel {
    /// Trains on a series sampled every `tau`. The box is the series hull
    /// widened by `box_inflation` of its range on each side.
    pub fn train(series: &[f64], tau: f64, opts: &BasisOptions, box_inflation: f64) -> Result<Self> {
        let pts: Vec<Vec<f64>> = series.iter().map(|t| vec![*t]).collect();
        let basis = DiffusionBasis::build(&pts, opts)?;
        let operator = build_shift_operator(&basis, &basis.index, tau)?;
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = box_inflation * (hi - lo);
        Ok(Self {
            basis,
            operator,
            tau,
            bounds: (lo - pad, hi + pad),
        })
    }

    /// Coefficients of a Gaussian bump restricted to the training points.
    pub fn gaussian_coefficients(&self, mean: f64, std: f64) -> Result<DVector<f64>> {
        if !(std > 0.0) {
            return Err(Error::Domain("initial θ spread must be > 0".into()));
        }
        let w: Vec<f64> = (0..self.basis.n())
            .map(|i| (-0.5 * ((self.basis.points[(i, 0)] - mean) / std).powi(2)).exp())
            .collect();
        self.basis.project_weights(&w)
    }
}

/// Where each member's θ comes from during a forecast.
#[derive(Debug, Clone)]
pub enum ThetaSource<'a> {
    Fixed(f64),
    /// θ per forecast interval, shared by all members.
    Oracle(&'a [f64]),
    /// Independent draws per member from the evolved density.
    Diffusion {
        model: &'a ParamForecastModel,
        c0: DVector<f64>,
    },
}

/// Ensemble forecast of the ring with members stored as columns. θ is drawn
/// once per interval of length `dt` and held fixed within it; `on_cycle` sees
/// the members at every interval boundary, starting with the initial state.
/// Returns the number of θ draws clipped into the model's box.
#[allow(clippy::too_many_arguments)]
pub fn couple_forecast<R, F>(
    members: &mut DMatrix<f64>,
    forcing: f64,
    source: ThetaSource<'_>,
    cycles: usize,
    dt: f64,
    h: f64,
    rng: &mut R,
    mut on_cycle: F,
) -> Result<usize>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &DMatrix<f64>),
{
    let (steps, hs) = steps_per(dt, h)?;
    let (n, k) = members.shape();
    let mut c = match &source {
        ThetaSource::Diffusion { c0, .. } => Some(c0.clone()),
        _ => None,
    };
    if let ThetaSource::Oracle(s) = &source {
        if s.len() < cycles {
            return Err(Error::Domain(format!("oracle θ has {} values for {cycles} intervals", s.len())));
        }
    }
    let mut rk = Rk4::new(n);
    let mut clipped = 0;
    on_cycle(0, members);
    for m in 0..cycles {
        let thetas: Vec<f64> = match &source {
            ThetaSource::Fixed(t) => vec![*t; k],
            ThetaSource::Oracle(s) => vec![s[m]; k],
            ThetaSource::Diffusion { model, .. } => {
                let cm = c.as_ref().expect("diffusion source carries coefficients");
                let (lo, hi) = model.bounds;
                model
                    .basis
                    .sample(cm, k, rng)?
                    .into_iter()
                    .map(|p| {
                        let t = p[0];
                        if t < lo || t > hi {
                            clipped += 1;
                        }
                        t.clamp(lo, hi)
                    })
                    .collect()
            }
        };
        for (j, theta) in thetas.iter().enumerate() {
            let mut col = members.column_mut(j);
            let z = col.as_mut_slice();
            let mut f = |_t: f64, s: &[f64], o: &mut [f64]| l96_advective_drift_into(s, *theta, forcing, o);
            for s in 0..steps {
                rk.step(&mut f, (m * steps + s) as f64 * hs, hs, z)?;
            }
        }
        if let (ThetaSource::Diffusion { model, .. }, Some(cm)) = (&source, c.as_mut()) {
            *cm = model.operator.evolve(cm, 1);
        }
        on_cycle(m + 1, members);
    }
    Ok(clipped)
}

/// Member-wise forecast of the full coupled state.
fn perfect_forecast<F>(members: &mut DMatrix<f64>, p: &CoupledParams, cycles: usize, dt: f64, h: f64, mut on_cycle: F) -> Result<()>
where
    F: FnMut(usize, &DMatrix<f64>),
{
    let (steps, hs) = steps_per(dt, h)?;
    let mut rk = Rk4::new(p.dim());
    let mut f = |_t: f64, s: &[f64], o: &mut [f64]| coupled_drift_into(s, p, o);
    on_cycle(0, members);
    for m in 0..cycles {
        for mut col in members.column_iter_mut() {
            for s in 0..steps {
                rk.step(&mut f, (m * steps + s) as f64 * hs, hs, col.as_mut_slice())?;
            }
        }
        on_cycle(m + 1, members);
    }
    Ok(())
}

/// Mean over members and ring sites of the squared error.
fn member_mse(members: &DMatrix<f64>, n: usize, truth: &[f64]) -> f64 {
    let mut s = 0.0;
    for col in members.column_iter() {
        for i in 0..n {
            s += (col[i] - truth[i]).powi(2);
        }
    }
    s / (n * members.ncols()) as f64
}

// ---------------------------------------------------------------- experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiparamConfig {
    pub model: CoupledParams,
    /// RK4 step for truth, filters and forecasts.
    pub h: f64,
    /// Observation interval; also the diffusion-forecast step τ.
    pub dt_obs: f64,
    pub obs_var: f64,
    pub spinup: f64,
    pub ensemble: usize,
    /// Cycles whose extracted θ trains the diffusion model.
    pub training_cycles: usize,
    /// Extracted θ values dropped from the start of the training window.
    pub training_discard: usize,
    pub launches: usize,
    /// Cycles between forecast launches.
    pub launch_spacing: usize,
    pub horizon: f64,
    /// Record the RMSE every this many cycles.
    pub lead_every: usize,
    pub extraction: ExtractionConfig,
    pub perfect_inflation: f64,
    pub basis: BasisOptions,
    /// Lower bound on the width of the initial θ density.
    pub init_std_floor: f64,
    pub box_inflation: f64,
}

impl Default for SemiparamConfig {
    fn default() -> Self {
        Self {
            model: CoupledParams::default(),
            h: 0.01,
            dt_obs: 0.05,
            obs_var: 1.0,
            spinup: 10.0,
            ensemble: 86,
            training_cycles: 5000,
            training_discard: 200,
            launches: 200,
            launch_spacing: 50,
            horizon: 10.0,
            lead_every: 2,
            extraction: ExtractionConfig::default(),
            perfect_inflation: 1.05,
            basis: BasisOptions {
                modes: 20,
                bandwidth_scale: 0.05,
                ..Default::default()
            },
            init_std_floor: 0.02,
            box_inflation: 0.1,
        }
    }
}

impl SemiparamConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.extraction.adaptive.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.h > 0.0 && self.dt_obs >= self.h && self.obs_var > 0.0 && self.spinup >= 0.0) {
            return fail("need h > 0, dt_obs >= h, obs_var > 0 and spinup >= 0");
        }
        if self.ensemble < 2 || self.launches == 0 || self.launch_spacing == 0 || self.lead_every == 0 {
            return fail("ensemble >= 2 and launches, launch_spacing, lead_every >= 1 required");
        }
        if self.training_discard + 100 > self.training_cycles {
            return fail("training window needs at least 100 cycles after the discard");
        }
        if !(self.horizon >= 0.0) || !(self.perfect_inflation >= 1.0) || !(self.extraction.inflation >= 1.0) {
            return fail("horizon >= 0 and inflation >= 1 required");
        }
        if !(self.init_std_floor > 0.0) || !(self.box_inflation >= 0.0) {
            return fail("init_std_floor > 0 and box_inflation >= 0 required");
        }
        Ok(())
    }

    fn horizon_cycles(&self) -> usize {
        (self.horizon / self.dt_obs).round() as usize
    }

    fn launch_cycles(&self) -> Vec<usize> {
        (0..self.launches).map(|i| self.training_cycles + i * self.launch_spacing).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SemiparamRun {
    pub leads: Vec<f64>,
    pub rmse_perfect: Vec<f64>,
    pub rmse_semiparam: Vec<f64>,
    pub rmse_l96: Vec<f64>,
    pub clim_error: f64,
    /// Correlation of extracted and true θ over the filtered cycles.
    pub theta_corr: f64,
    /// Fraction of extracted θ inside `[0.5, 1.5]`.
    pub theta_in_range: f64,
    pub extraction_rmse: f64,
    pub perfect_filter_rmse: f64,
    pub clipped: usize,
    pub model: ParamForecastModel,
    pub rmse_table: ResultTable,
    pub theta_table: ResultTable,
    pub summary_table: ResultTable,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (diagnostics::mean(a), diagnostics::mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn run_semiparam_experiment(cfg: &SemiparamConfig, seed: u64) -> Result<SemiparamRun> {
    cfg.validate()?;
    let p = cfg.model;
    let n = p.n;
    let k = cfg.ensemble;
    let launches = cfg.launch_cycles();
    let horizon = cfg.horizon_cycles();
    let filtered = launches.last().unwrap() + 1;
    let total = filtered + horizon;

    let mut g = rng::stream(seed, "ex7_truth", 0);
    let truth = coupled_run(&p, total, cfg.dt_obs, cfg.h, cfg.spinup, &mut g)?;
    let obs = observe(&truth, n, cfg.obs_var, &mut rng::stream(seed, "ex7_obs", 0));
    let obs = &obs[..filtered];

    let ext = extract_parameter_series(
        &p,
        &truth,
        obs,
        cfg.obs_var,
        cfg.h,
        k,
        &cfg.extraction,
        &launches,
        rng::child_seed(seed, "ex7_extract", 0),
    )?;
    let perfect = perfect_model_filter(
        &p,
        &truth,
        obs,
        cfg.obs_var,
        cfg.h,
        k,
        cfg.perfect_inflation,
        &launches,
        rng::child_seed(seed, "ex7_perfect", 0),
    )?;

    let training = &ext.theta[cfg.training_discard..cfg.training_cycles];
    let model = ParamForecastModel::train(training, cfg.dt_obs, &cfg.basis, cfg.box_inflation)?;
    for w in &model.basis.warnings {
        log::warn!("θ basis: {w}");
    }

    let true_theta = truth.theta(&p);
    let skip = cfg.training_discard;
    let theta_corr = pearson(&ext.theta[skip..], &true_theta[skip..filtered]);
    let theta_in_range =
        ext.theta[skip..].iter().filter(|t| (0.5..=1.5).contains(*t)).count() as f64 / (filtered - skip) as f64;

    // squared errors per launch and lead: [perfect, semiparametric, l96]
    let n_leads = horizon / cfg.lead_every + 1;
    let per_launch = exec::try_map_indexed(launches.len(), |li| -> Result<(Vec<[f64; 3]>, usize)> {
        let m0 = launches[li];
        let mut acc = vec![[0.0; 3]; n_leads];
        let record = |slot: usize| {
            let truth = &truth;
            move |c: usize, members: &DMatrix<f64>, acc: &mut Vec<[f64; 3]>| {
                if c % cfg.lead_every == 0 {
                    acc[c / cfg.lead_every][slot] = member_mse(members, n, &truth.states[m0 + c][..n]);
                }
            }
        };
        let mut r = rng::stream(seed, "ex7_launch", li as u64);

        let mut full = perfect.kept[li].1.members.clone();
        let rec = record(0);
        perfect_forecast(&mut full, &p, horizon, cfg.dt_obs, cfg.h, |c, m| rec(c, m, &mut acc))?;

        let an = &ext.kept[li].1;
        let ring = an.members.rows(0, n).into_owned();
        let th: Vec<f64> = an.members.row(n).iter().copied().collect();
        let std = diagnostics::variance(&th).sqrt().hypot(cfg.init_std_floor);
        let c0 = model.gaussian_coefficients(diagnostics::mean(&th), std)?;
        let mut x = ring.clone();
        let rec = record(1);
        let source = ThetaSource::Diffusion { model: &model, c0 };
        let clipped = couple_forecast(&mut x, p.forcing, source, horizon, cfg.dt_obs, cfg.h, &mut r, |c, m| {
            rec(c, m, &mut acc)
        })?;

        let mut x = ring;
        let rec = record(2);
        couple_forecast(&mut x, p.forcing, ThetaSource::Fixed(1.0), horizon, cfg.dt_obs, cfg.h, &mut r, |c, m| {
            rec(c, m, &mut acc)
        })?;
        Ok((acc, clipped))
    })?;

    let mut sums = vec![[0.0; 3]; n_leads];
    let mut clipped = 0;
    for (acc, c) in &per_launch {
        clipped += c;
        for (s, a) in sums.iter_mut().zip(acc) {
            for v in 0..3 {
                s[v] += a[v];
            }
        }
    }
    let nl = launches.len() as f64;
    let curve = |v: usize| -> Vec<f64> { sums.iter().map(|s| (s[v] / nl).sqrt()).collect() };
    let (rmse_perfect, rmse_semiparam, rmse_l96) = (curve(0), curve(1), curve(2));
    let leads: Vec<f64> = (0..n_leads).map(|i| (i * cfg.lead_every) as f64 * cfg.dt_obs).collect();
    let clim_error = diagnostics::climatological_error(&truth.slow(&p)[skip..])?;

    let mut rmse_table = ResultTable::new("ex7_rmse", &["lead", "rmse_perfect", "rmse_semiparam", "rmse_l96", "clim_err"]);
    for i in 0..n_leads {
        rmse_table.push(vec![leads[i], rmse_perfect[i], rmse_semiparam[i], rmse_l96[i], clim_error])?;
    }
    let mut theta_table = ResultTable::new("ex7_theta", &["t", "theta_true", "theta_extracted", "theta_std", "q", "r"]);
    for m in 0..filtered {
        theta_table.push(vec![
            m as f64 * cfg.dt_obs,
            true_theta[m],
            ext.theta[m],
            ext.theta_std[m],
            ext.q[m],
            ext.r[m],
        ])?;
    }
    let extraction_rmse = diagnostics::mean(&ext.rmse[skip..]);
    let perfect_filter_rmse = diagnostics::mean(&perfect.rmse[skip..]);
    let mut summary_table = ResultTable::labeled("ex7_summary", "metric", &["value"]);
    for (key, v) in [
        ("theta_correlation", theta_corr),
        ("theta_in_range_fraction", theta_in_range),
        ("extraction_filter_rmse", extraction_rmse),
        ("perfect_filter_rmse", perfect_filter_rmse),
        ("climatological_error", clim_error),
        ("theta_bandwidth", model.basis.bandwidth),
        ("theta_box_lo", model.bounds.0),
        ("theta_box_hi", model.bounds.1),
        ("clipped_draws", clipped as f64),
    ] {
        summary_table.push_labeled(key, vec![v])?;
    }

    Ok(SemiparamRun {
        leads,
        rmse_perfect,
        rmse_semiparam,
        rmse_l96,
        clim_error,
        theta_corr,
        theta_in_range,
        extraction_rmse,
        perfect_filter_rmse,
        clipped,
        model,
        rmse_table,
        theta_table,
        summary_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::l96_drift_into;

    fn ring(seed: u64, n: usize, k: usize) -> DMatrix<f64> {
        let mut g = rng::stream(seed, "ring", 0);
        DMatrix::from_fn(n, k, |_, _| 2.0 + 3.0 * g.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn advective_drift_reduces_to_standard_form() {
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin() * 4.0).collect();
        let (mut a, mut b) = (vec![0.0; 7], vec![0.0; 7]);
        l96_advective_drift_into(&x, 1.0, 8.0, &mut a);
        l96_drift_into(&x, 1.0, 8.0, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        // θ only scales the x_{j+1} x_{j-1} term
        l96_advective_drift_into(&x, 1.5, 8.0, &mut b);
        for j in 0..7 {
            let t = x[(j + 1) % 7] * x[(j + 6) % 7];
            assert!((b[j] - a[j] - 0.5 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_theta_stays_in_the_unit_band() {
        let p = CoupledParams::default();
        let run = coupled_run(&p, 4000, 0.05, 0.01, 5.0, &mut rng::stream(1, "t", 0)).unwrap();
        let th = run.theta(&p);
        assert!(th.iter().all(|t| (0.5..=1.5).contains(t)));
        assert!(diagnostics::variance(&th) > 0.01);
        let c = CoupledParams {
            theta_constant: Some(1.2),
            ..p
        };
        assert!(coupled_run(&c, 10, 0.05, 0.01, 1.0, &mut rng::stream(1, "t", 0))
            .unwrap()
            .theta(&c)
            .iter()
            .all(|t| *t == 1.2));
    }

    #[test]
    fn fixed_theta_forecast_is_plain_lorenz96() {
        let x0 = ring(2, 40, 5);
        let mut x = x0.clone();
        let mut seen = 0;
        couple_forecast(&mut x, 8.0, ThetaSource::Fixed(1.0), 20, 0.05, 0.01, &mut rng::stream(0, "t", 0), |_, _| {
            seen += 1
        })
        .unwrap();
        assert_eq!(seen, 21);
        let mut rk = Rk4::new(40);
        let mut f = |_t: f64, s: &[f64], o: &mut [f64]| l96_drift_into(s, 1.0, 8.0, o);
        for j in 0..5 {
            let mut z: Vec<f64> = x0.column(j).iter().copied().collect();
            for s in 0..100 {
                rk.step(&mut f, s as f64 * 0.01, 0.01, &mut z).unwrap();
            }
            for i in 0..40 {
                assert!((z[i] - x[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_horizon_returns_the_initial_ensemble() {
        let x0 = ring(3, 8, 4);
        let mut x = x0.clone();
        let mut calls = Vec::new();
        let clipped = couple_forecast(&mut x, 8.0, ThetaSource::Fixed(0.7), 0, 0.05, 0.01, &mut rng::stream(0, "t", 0), |c, _| {
            calls.push(c)
        })
        .unwrap();
        assert_eq!((x, calls, clipped), (x0, vec![0], 0));
    }

    #[test]
    fn constant_oracle_matches_fixed_theta() {
        let x0 = ring(4, 10, 3);
        let (mut a, mut b) = (x0.clone(), x0);
        let series = vec![1.3; 30];
        let mut g = rng::stream(0, "t", 0);
        couple_forecast(&mut a, 8.0, ThetaSource::Oracle(&series), 30, 0.05, 0.01, &mut g, |_, _| ()).unwrap();
        couple_forecast(&mut b, 8.0, ThetaSource::Fixed(1.3), 30, 0.05, 0.01, &mut g, |_, _| ()).unwrap();
        assert_eq!(a, b);
        let mut c = a.clone();
        assert!(couple_forecast(&mut c, 8.0, ThetaSource::Oracle(&series), 31, 0.05, 0.01, &mut g, |_, _| ()).is_err());
    }

    fn toy_model() -> ParamForecastModel {
        let mut g = rng::stream(6, "t", 0);
        let mut t = 1.0;
        let series: Vec<f64> = (0..1500)
            .map(|_| {
                t = 1.0 + 0.9 * (t - 1.0) + 0.05 * g.sample::<f64, _>(StandardNormal);
                t
            })
            .collect();
        let opts = BasisOptions {
            modes: 10,
            bandwidth: Some(0.002),
            ..Default::default()
        };
        ParamForecastModel::train(&series, 0.05, &opts, 0.1).unwrap()
    }

    #[test]
    fn diffusion_draws_respect_the_box() {
        let mut model = toy_model();
        let (lo, hi) = model.bounds;
        assert!(lo < 1.0 && hi > 1.0);
        let mut x = ring(5, 8, 20);
        let c0 = model.gaussian_coefficients(1.0, 0.05).unwrap();
        let src = ThetaSource::Diffusion {
            model: &model,
            c0: c0.clone(),
        };
        let clipped = couple_forecast(&mut x, 8.0, src, 10, 0.05, 0.01, &mut rng::stream(0, "t", 0), |_, _| ()).unwrap();
        assert_eq!(clipped, 0);
        // a box narrower than the data forces clipping
        model.bounds = (0.99, 1.01);
        let src = ThetaSource::Diffusion { model: &model, c0 };
        let clipped = couple_forecast(&mut x, 8.0, src, 10, 0.05, 0.01, &mut rng::stream(0, "t", 0), |_, _| ()).unwrap();
        assert!(clipped > 0);
        assert!(model.gaussian_coefficients(1.0, 0.0).is_err());
    }

    fn twin(p: &CoupledParams, cycles: usize, seed: u64) -> (CoupledRun, Vec<DVector<f64>>) {
        let run = coupled_run(p, cycles, 0.05, 0.01, 5.0, &mut rng::stream(seed, "truth", 0)).unwrap();
        let obs = observe(&run, p.n, 1.0, &mut rng::stream(seed, "obs", 0));
        (run, obs)
    }

    #[test]
    fn extraction_recovers_a_constant_parameter() {
        let p = CoupledParams {
            theta_constant: Some(1.2),
            ..Default::default()
        };
        let (run, obs) = twin(&p, 800, 7);
        let ext = extract_parameter_series(&p, &run, &obs, 1.0, 0.01, 50, &ExtractionConfig::default(), &[10], 7).unwrap();
        let m = diagnostics::mean(&ext.theta[300..]);
        assert!((m - 1.2).abs() < 0.05 * 1.2, "mean {m}");
        assert_eq!(ext.kept.len(), 1);
        assert_eq!(ext.kept[0].0, 10);
    }

    #[test]
    fn extraction_tracks_the_hidden_parameter() {
        let p = CoupledParams::default();
        let (run, obs) = twin(&p, 2500, 8);
        let ext = extract_parameter_series(&p, &run, &obs, 1.0, 0.01, 86, &ExtractionConfig::default(), &[], 8).unwrap();
        let truth = run.theta(&p);
        let corr = pearson(&ext.theta[200..], &truth[200..]);
        assert!(corr > 0.8, "correlation {corr}");
        let inside = ext.theta[200..].iter().filter(|t| (0.5..=1.5).contains(*t)).count() as f64 / 2300.0;
        assert!(inside >= 0.99, "inside {inside}");
        assert!(diagnostics::mean(&ext.rmse[200..]) < 1.0);
    }

    #[test]
    fn perfect_filter_beats_the_observation_noise() {
        let p = CoupledParams::default();
        let (run, obs) = twin(&p, 600, 9);
        let f = perfect_model_filter(&p, &run, &obs, 1.0, 0.01, 60, 1.02, &[599], 9).unwrap();
        assert!(diagnostics::mean(&f.rmse[200..]) < 0.5);
        assert_eq!(f.kept[0].1.dim(), 43);
    }

    #[test]
    fn config_validation() {
        assert!(SemiparamConfig::default().validate().is_ok());
        let bad = [
            SemiparamConfig {
                ensemble: 1,
                ..Default::default()
            },
            SemiparamConfig {
                dt_obs: 0.001,
                ..Default::default()
            },
            SemiparamConfig {
                training_discard: 4950,
                ..Default::default()
            },
            SemiparamConfig {
                perfect_inflation: 0.9,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn small_experiment_produces_consistent_tables() {
        let cfg = SemiparamConfig {
            training_cycles: 600,
            training_discard: 100,
            launches: 3,
            launch_spacing: 20,
            horizon: 1.0,
            ensemble: 20,
            ..Default::default()
        };
        let r = run_semiparam_experiment(&cfg, 3).unwrap();
        assert_eq!(r.leads.len(), 11);
        assert_eq!(r.rmse_table.rows().len(), 11);
        assert!(r.rmse_perfect[0] < r.rmse_perfect[10]);
        assert!(r.clim_error > 0.0);
        let again = run_semiparam_experiment(&cfg, 3).unwrap();
        assert_eq!(r.rmse_semiparam, again.rmse_semiparam);
    }
}
