//! Stochastic closures for the slow layer of the two-layer Lorenz-96 model.
//!
//! The single-layer model stands in for the unknown two-layer dynamics and
//! its error is modeled either offline, by regressing finite-difference
//! residuals on the state, or online, by augmenting the filter state with
//! the damping `α` and estimating the noise amplitude and observation error
//! adaptively.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptiveConfig, AdaptiveEstimator, NoiseStructure};
use crate::diagnostics::{self, DensityMethod};
use crate::exec;
use crate::kalman::{etkf_analysis, Ensemble, EtkfOptions, LinearObs};
use crate::models::{l96_drift_into, l96_two_layer_drift_into, selection_matrix, Rk4, TwoLayerL96Params};
use crate::rng;
use crate::table::ResultTable;
use crate::{Error, Result};

/// Slow components sampled every `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowRun {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl SlowRun {
    pub fn site(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }
}

/// Integrates the two-layer model with RK4 at step `h` and keeps the slow
/// block every `every` steps after `spinup`.
pub fn two_layer_slow_run<R: Rng + ?Sized>(
    p: &TwoLayerL96Params,
    t_end: f64,
    h: f64,
    every: usize,
    spinup: f64,
    rng: &mut R,
) -> Result<SlowRun> {
    p.validate()?;
    if !(h > 0.0) || every == 0 || !(t_end > 0.0) {
        return Err(Error::Config("two-layer run needs h > 0, every >= 1, t_end > 0".into()));
    }
    let mut z: Vec<f64> = (0..p.dim())
        .map(|i| {
            let s = if i < p.n { 1.0 } else { 0.1 };
            s * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mut rk = Rk4::new(p.dim());
    let mut f = |_t: f64, x: &[f64], out: &mut [f64]| l96_two_layer_drift_into(x, p, out);
    let spin = (spinup / h).round() as usize;
    for k in 0..spin {
        rk.step(&mut f, k as f64 * h, h, &mut z)?;
    }
    let samples = (t_end / (h * every as f64)).round() as usize;
    let mut states = Vec::with_capacity(samples + 1);
    states.push(z[..p.n].to_vec());
    for s in 0..samples {
        for k in 0..every {
            rk.step(&mut f, ((s * every + k) as f64) * h, h, &mut z)?;
        }
        states.push(z[..p.n].to_vec());
    }
    Ok(SlowRun {
        dt: h * every as f64,
        states,
    })
}

// ---------------------------------------------------------------- offline fit

/// Per-site paired states and residuals of the single-layer model.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub dt: f64,
    pub x: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

/// `r_i(t) = (x_i(t+δt) − x_i(t))/δt − [x_{i−1}(x_{i+1} − x_{i−2}) − x_i + F]`.
pub fn residual_series(run: &SlowRun, forcing: f64) -> Result<Residuals> {
    if run.states.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "residuals need at least 3 samples, got {}",
            run.states.len()
        )));
    }
    let n = run.states[0].len();
    let steps = run.states.len() - 1;
    let mut x = vec![Vec::with_capacity(steps); n];
    let mut r = vec![Vec::with_capacity(steps); n];
    let mut f = vec![0.0; n];
    for t in 0..steps {
        let (a, b) = (&run.states[t], &run.states[t + 1]);
        l96_drift_into(a, 1.0, forcing, &mut f);
        for i in 0..n {
            x[i].push(a[i]);
            r[i].push((b[i] - a[i]) / run.dt - f[i]);
        }
    }
    Ok(Residuals { dt: run.dt, x, r })
}

/// `r = −ζ − αx − βx² − γx³ + r̃` with `r̃` AR(1): lag-`dt` coefficient `φ`
/// and stationary standard deviation `σ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineFit {
    pub zeta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl OfflineFit {
    pub fn poly(&self, x: f64) -> f64 {
        -self.zeta - x * (self.alpha + x * (self.beta + x * self.gamma))
    }
}

fn ar1(tilde: &[Vec<f64>]) -> Result<(f64, f64)> {
    let (mut num, mut den, mut ss, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in tilde {
        for w in s.windows(2) {
            num += w[0] * w[1];
            den += w[0] * w[0];
        }
        ss += s.iter().map(|v| v * v).sum::<f64>();
        n += s.len();
    }
    let phi = num / den;
    if !(phi.abs() < 1.0) {
        return Err(Error::Domain(format!("AR(1) fit is not stationary (phi = {phi})")));
    }
    Ok((phi, (ss / n as f64).sqrt()))
}

/// Pooled least squares for the cubic, then an AR(1) fit of its residuals.
pub fn fit_cubic_ar1(res: &Residuals) -> Result<OfflineFit> {
    let all: Vec<f64> = res.x.iter().flatten().copied().collect();
    let mu = diagnostics::mean(&all);
    let sd = diagnostics::variance(&all).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Domain("states have zero spread; cubic fit is rank deficient".into()));
    }
    // normal equations in the standardized variable u = (x − μ)/s
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for (xs, rs) in res.x.iter().zip(&res.r) {
        for (&x, &r) in xs.iter().zip(rs) {
            let u = (x - mu) / sd;
            let row = Vector4::new(1.0, u, u * u, u * u * u);
            ata += row * row.transpose();
            atb += row * r;
        }
    }
    let b = ata
        .cholesky()
        .ok_or_else(|| Error::Domain("cubic design is rank deficient".into()))?
        .solve(&atb);
    // back to powers of x
    let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    let mut c = [0.0; 4];
    for k in 0..4 {
        for j in 0..=k {
            c[j] += b[k] * binom[k][j] * (-mu).powi((k - j) as i32) / sd.powi(k as i32);
        }
    }
    let fit = OfflineFit {
        zeta: -c[0],
        alpha: -c[1],
        beta: -c[2],
        gamma: -c[3],
        phi: 0.0,
        sigma: 0.0,
        dt: res.dt,
    };
    let tilde: Vec<Vec<f64>> = res
        .x
        .iter()
        .zip(&res.r)
        .map(|(xs, rs)| xs.iter().zip(rs).map(|(&x, &r)| r - fit.poly(x)).collect())
        .collect();
    let (phi, sigma) = ar1(&tilde)?;
    Ok(OfflineFit { phi, sigma, ..fit })
}

/// The constrained fit `ζ = β = γ = φ = 0`: linear damping plus white noise.
pub fn fit_linear_white(res: &Residuals) -> Result<OfflineFit> {
    let (mut sxx, mut sxr) = (0.0, 0.0);
    for (xs, rs) in res.x.iter().zip(&res.r) {
        for (&x, &r) in xs.iter().zip(rs) {
            sxx += x * x;
            sxr += x * r;
        }
    }
    if !(sxx > 0.0) {
        return Err(Error::Domain("states are identically zero; linear fit is rank deficient".into()));
    }
    let alpha = -sxr / sxx;
    let (mut ss, mut n) = (0.0, 0usize);
    for (xs, rs) in res.x.iter().zip(&res.r) {
        for (&x, &r) in xs.iter().zip(rs) {
            ss += (r + alpha * x).powi(2);
            n += 1;
        }
    }
    Ok(OfflineFit {
        zeta: 0.0,
        alpha,
        beta: 0.0,
        gamma: 0.0,
        phi: 0.0,
        sigma: (ss / n as f64).sqrt(),
        dt: res.dt,
    })
}

// ---------------------------------------------------------------- reduced models

/// Closure added to the single-layer model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Closure {
    /// `−α x + σ̂ Ẇ`
    Linear { alpha: f64, sigma: f64 },
    /// Cubic drift plus AR(1) forcing carried as extra state.
    CubicAr1(OfflineFit),
}

impl Closure {
    /// Extra state per site (the AR(1) forcing).
    pub fn extra(&self) -> usize {
        match self {
            Closure::Linear { .. } => 0,
            Closure::CubicAr1(_) => 1,
        }
    }
}

/// Single-layer model with a closure, stepped at `h`: RK4 on the drift, then
/// the additive noise (or the AR(1) update) over the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedModel {
    pub n: usize,
    pub forcing: f64,
    pub closure: Closure,
    pub h: f64,
}

impl ReducedModel {
    pub fn dim(&self) -> usize {
        self.n * (1 + self.closure.extra())
    }

    pub fn advance<R: Rng + ?Sized>(&self, z: &mut [f64], t0: f64, dt: f64, rk: &mut Rk4, rng: &mut R) -> Result<()> {
        let steps = (dt / self.h).round().max(1.0) as usize;
        let h = dt / steps as f64;
        let n = self.n;
        let forcing = self.forcing;
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            match self.closure {
                Closure::Linear { alpha, sigma } => {
                    let mut f = |_t: f64, x: &[f64], out: &mut [f64]| {
                        l96_drift_into(x, 1.0 + alpha, forcing, out);
                    };
                    rk.step(&mut f, t, h, z)?;
                    let s = sigma * h.sqrt();
                    for v in z.iter_mut() {
                        *v += s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Closure::CubicAr1(fit) => {
                    let mut f = |_t: f64, s: &[f64], out: &mut [f64]| {
                        let (x, r) = s.split_at(n);
                        let (ox, or) = out.split_at_mut(n);
                        l96_drift_into(x, 1.0, forcing, ox);
                        for i in 0..n {
                            ox[i] += fit.poly(x[i]) + r[i];
                            or[i] = 0.0;
                        }
                    };
                    rk.step(&mut f, t, h, z)?;
                    let phi = fit.phi.powf(h / fit.dt);
                    let s = fit.sigma * (1.0 - phi * phi).sqrt();
                    for v in z[n..].iter_mut() {
                        *v = phi * *v + s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Blowup { time: t + h });
            }
        }
        Ok(())
    }

    /// Stationary start for the extra state, zero-mean slow block.
    pub fn initial_state<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut z = x.to_vec();
        if let Closure::CubicAr1(fit) = self.closure {
            z.extend((0..self.n).map(|_| fit.sigma * rng.sample::<f64, _>(StandardNormal)));
        }
        z
    }
}

/// Long free run of a reduced model sampled every `dt`.
pub fn free_run<R: Rng + ?Sized>(model: &ReducedModel, t_end: f64, dt: f64, spinup: f64, rng: &mut R) -> Result<SlowRun> {
    let x0: Vec<f64> = (0..model.n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut z = model.initial_state(&x0, rng);
    let mut rk = Rk4::new(model.dim());
    if spinup > 0.0 {
        model.advance(&mut z, -spinup, spinup, &mut rk, rng)?;
    }
    let samples = (t_end / dt).round() as usize;
    let mut states = Vec::with_capacity(samples + 1);
    states.push(z[..model.n].to_vec());
    for s in 0..samples {
        model.advance(&mut z, s as f64 * dt, dt, &mut rk, rng)?;
        states.push(z[..model.n].to_vec());
    }
    Ok(SlowRun { dt, states })
}

// ---------------------------------------------------------------- filters

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleTrace {
    pub rmse: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// RMSE over cycles after the discard window (infinite if diverged).
    pub rmse: f64,
    /// Cycle at which divergence was declared.
    pub diverged_at: Option<usize>,
    pub trace: Vec<CycleTrace>,
}

impl FilterOutcome {
    fn finish(trace: Vec<CycleTrace>, discard: usize, diverged_at: Option<usize>) -> Self {
        let rmse = if diverged_at.is_some() {
            f64::INFINITY
        } else {
            let tail = &trace[discard.min(trace.len())..];
            (tail.iter().map(|c| c.rmse * c.rmse).sum::<f64>() / tail.len().max(1) as f64).sqrt()
        };
        Self { rmse, diverged_at, trace }
    }

    /// Time means of the traced parameters after `discard` cycles.
    pub fn mean_params(&self, discard: usize) -> (f64, f64, f64) {
        let tail = &self.trace[discard.min(self.trace.len())..];
        let n = tail.len().max(1) as f64;
        (
            tail.iter().map(|c| c.alpha).sum::<f64>() / n,
            tail.iter().map(|c| c.sigma).sum::<f64>() / n,
            tail.iter().map(|c| c.r).sum::<f64>() / n,
        )
    }
}

/// Declares divergence after `window` consecutive cycles with RMSE above
/// `factor ×` the climatological error.
#[derive(Debug, Clone, Copy)]
pub struct DivergenceMonitor {
    pub threshold: f64,
    pub window: usize,
    run: usize,
}

impl DivergenceMonitor {
    pub fn new(clim_error: f64, factor: f64, window: usize) -> Self {
        Self {
            threshold: factor * clim_error,
            window,
            run: 0,
        }
    }

    pub fn observe(&mut self, rmse: f64) -> bool {
        if rmse.is_finite() && rmse <= self.threshold {
            self.run = 0;
        } else {
            self.run += 1;
        }
        self.run >= self.window
    }
}

/// Truth and noisy observations of the slow sites for one filter run.
#[derive(Debug, Clone)]
pub struct TwinData {
    pub dt_obs: f64,
    pub truth: Vec<Vec<f64>>,
    pub obs: Vec<DVector<f64>>,
    pub obs_sites: Vec<usize>,
    pub obs_var: f64,
    pub clim_mean: Vec<f64>,
    pub clim_std: Vec<f64>,
    pub clim_error: f64,
}

impl TwinData {
    pub fn from_run<R: Rng + ?Sized>(run: &SlowRun, obs_sites: Vec<usize>, obs_var: f64, rng: &mut R) -> Result<Self> {
        let n = run.states[0].len();
        let truth = run.states[1..].to_vec();
        let obs = truth
            .iter()
            .map(|x| {
                DVector::from_iterator(
                    obs_sites.len(),
                    obs_sites.iter().map(|&i| x[i] + obs_var.sqrt() * rng.sample::<f64, _>(StandardNormal)),
                )
            })
            .collect();
        let clim_mean = (0..n).map(|i| diagnostics::mean(&run.site(i))).collect();
        let clim_std = (0..n).map(|i| diagnostics::variance(&run.site(i)).sqrt()).collect();
        Ok(Self {
            dt_obs: run.dt,
            clim_error: diagnostics::climatological_error(&run.states)?,
            truth,
            obs,
            obs_sites,
            obs_var,
            clim_mean,
            clim_std,
        })
    }

    fn initial_members<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                self.clim_mean
                    .iter()
                    .zip(&self.clim_std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

fn slow_rmse(members: &Ensemble, n: usize, truth: &[f64]) -> f64 {
    let mean = members.mean();
    ((0..n).map(|i| (mean[i] - truth[i]).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// ETKF with a fixed reduced model and known R.
pub fn offline_filter(
    data: &TwinData,
    model: &ReducedModel,
    k: usize,
    opts: &EtkfOptions,
    discard: usize,
    seed: u64,
) -> Result<FilterOutcome> {
    let n = model.n;
    let d = model.dim();
    let mut g = rng::stream(seed, "offline_filter", 0);
    let init = data.initial_members(k, &mut g);
    let mut cols = Vec::with_capacity(d * k);
    for x in &init {
        cols.extend(model.initial_state(x, &mut g));
    }
    let mut ens = Ensemble::new(DMatrix::from_vec(d, k, cols))?;
    let obs = LinearObs::new(
        selection_matrix(d, &data.obs_sites),
        DMatrix::identity(data.obs_sites.len(), data.obs_sites.len()) * data.obs_var,
    )?;
    let (alpha, sigma) = match model.closure {
        Closure::Linear { alpha, sigma } => (alpha, sigma),
        Closure::CubicAr1(f) => (f.alpha, f.sigma),
    };
    let mut monitor = DivergenceMonitor::new(data.clim_error, 10.0, 100);
    let mut trace = Vec::with_capacity(data.obs.len());
    for (m, v) in data.obs.iter().enumerate() {
        let t0 = m as f64 * data.dt_obs;
        let step = ens.forecast(|j, z| {
            let mut r = rng::stream(seed, "offline_member", (m * k + j) as u64);
            model.advance(z, t0, data.dt_obs, &mut Rk4::new(d), &mut r)
        });
        if let Err(Error::Blowup { .. }) = step {
            return Ok(FilterOutcome::finish(trace, discard, Some(m)));
        }
        step?;
        ens = match etkf_analysis(&ens, v, &obs, None, opts, &mut g) {
            Ok(a) => a.ensemble,
            Err(Error::Singular { .. }) | Err(Error::DegenerateEnsemble(_)) => {
                return Ok(FilterOutcome::finish(trace, discard, Some(m)));
            }
            Err(e) => return Err(e),
        };
        let rmse = slow_rmse(&ens, n, &data.truth[m]);
        trace.push(CycleTrace {
            rmse,
            alpha,
            sigma,
            r: data.obs_var,
        });
        if monitor.observe(rmse) {
            return Ok(FilterOutcome::finish(trace, discard, Some(m)));
        }
    }
    Ok(FilterOutcome::finish(trace, discard, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub ensemble: usize,
    pub alpha0: f64,
    pub alpha_spread: f64,
    /// Random-walk amplitude of α per unit time, keeps its spread alive.
    pub alpha_rw: f64,
    pub sigma0: f64,
    pub r0: f64,
    /// Cycles run with the initial `(Q, R)` before the noise estimator starts,
    /// so the spin-up transient is not read as noise.
    pub warmup: usize,
    pub adaptive: AdaptiveConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            ensemble: 18,
            alpha0: 0.0,
            alpha_spread: 0.5,
            alpha_rw: 0.02,
            sigma0: 1.0,
            r0: 0.5,
            warmup: 50,
            adaptive: AdaptiveConfig::default(),
        }
    }
}

/// ETKF on `(x_1..x_N, α)` with adaptive `Q = q1·I` on the slow block
/// (`σ̂ = √(q1/Δt)`) and adaptive `R = r·I`.
pub fn online_filter(
    data: &TwinData,
    forcing: f64,
    h: f64,
    cfg: &OnlineConfig,
    opts: &EtkfOptions,
    discard: usize,
    seed: u64,
) -> Result<FilterOutcome> {
    let n = data.truth[0].len();
    let d = n + 1;
    let k = cfg.ensemble;
    let mut g = rng::stream(seed, "online_filter", 0);
    let init = data.initial_members(k, &mut g);
    let mut cols = Vec::with_capacity(d * k);
    for x in &init {
        cols.extend(x);
        cols.push(cfg.alpha0 + cfg.alpha_spread * g.sample::<f64, _>(StandardNormal));
    }
    let mut ens = Ensemble::new(DMatrix::from_vec(d, k, cols))?;
    let mut mask = vec![1.0; n];
    mask.push(0.0);
    let structure = NoiseStructure::masked(selection_matrix(d, &data.obs_sites), &mask);
    let mut est = AdaptiveEstimator::new(
        structure,
        cfg.adaptive,
        &[cfg.sigma0 * cfg.sigma0 * data.dt_obs, cfg.r0],
    )?;
    let mut monitor = DivergenceMonitor::new(data.clim_error, 10.0, 100);
    let mut trace = Vec::with_capacity(data.obs.len());
    let steps = (data.dt_obs / h).round().max(1.0) as usize;
    let hs = data.dt_obs / steps as f64;
    for (m, v) in data.obs.iter().enumerate() {
        let step = ens.forecast(|j, z| {
            let mut rk = Rk4::new(d);
            let mut f = |_t: f64, s: &[f64], out: &mut [f64]| {
                let (x, a) = s.split_at(n);
                l96_drift_into(x, 1.0 + a[0], forcing, &mut out[..n]);
                out[n] = 0.0;
            };
            for s in 0..steps {
                rk.step(&mut f, (m * steps + s) as f64 * hs, hs, z)?;
            }
            let mut r = rng::stream(seed, "online_alpha", (m * k + j) as u64);
            z[n] += cfg.alpha_rw * data.dt_obs.sqrt() * r.sample::<f64, _>(StandardNormal);
            Ok(())
        });
        if let Err(Error::Blowup { .. }) = step {
            return Ok(FilterOutcome::finish(trace, discard, Some(m)));
        }
        step?;
        let an = if m < cfg.warmup {
            LinearObs::new(est.structure.h.clone(), est.r())
                .and_then(|obs| etkf_analysis(&ens, v, &obs, Some(&est.q()), opts, &mut g))
        } else {
            est.assimilate(&ens, v, opts, &mut g)
        };
        let an = match an {
            Ok(a) => a,
            Err(Error::Singular { .. }) | Err(Error::DegenerateEnsemble(_)) => {
                return Ok(FilterOutcome::finish(trace, discard, Some(m)));
            }
            Err(e) => return Err(e),
        };
        ens = an.ensemble;
        let p = est.params();
        let rmse = slow_rmse(&ens, n, &data.truth[m]);
        trace.push(CycleTrace {
            rmse,
            alpha: ens.mean()[n],
            sigma: (p.q1 / data.dt_obs).sqrt(),
            r: p.r,
        });
        if monitor.observe(rmse) {
            return Ok(FilterOutcome::finish(trace, discard, Some(m)));
        }
    }
    Ok(FilterOutcome::finish(trace, discard, None))
}

/// Perfect-model ETKF on the full two-layer state (expensive).
pub fn full_model_filter(
    data: &TwinData,
    p: &TwoLayerL96Params,
    h: f64,
    k: usize,
    opts: &EtkfOptions,
    discard: usize,
    seed: u64,
) -> Result<FilterOutcome> {
    let d = p.dim();
    let mut g = rng::stream(seed, "full_filter", 0);
    let init = data.initial_members(k, &mut g);
    let mut cols = Vec::with_capacity(d * k);
    for x in &init {
        cols.extend(x);
        cols.extend((0..d - p.n).map(|_| 0.1 * g.sample::<f64, _>(StandardNormal)));
    }
    let mut ens = Ensemble::new(DMatrix::from_vec(d, k, cols))?;
    let obs = LinearObs::new(
        selection_matrix(d, &data.obs_sites),
        DMatrix::identity(data.obs_sites.len(), data.obs_sites.len()) * data.obs_var,
    )?;
    let steps = (data.dt_obs / h).round().max(1.0) as usize;
    let hs = data.dt_obs / steps as f64;
    let mut trace = Vec::with_capacity(data.obs.len());
    for (m, v) in data.obs.iter().enumerate() {
        ens.forecast(|_, z| {
            let mut rk = Rk4::new(d);
            let mut f = |_t: f64, x: &[f64], out: &mut [f64]| l96_two_layer_drift_into(x, p, out);
            for s in 0..steps {
                rk.step(&mut f, (m * steps + s) as f64 * hs, hs, z)?;
            }
            Ok(())
        })?;
        ens = etkf_analysis(&ens, v, &obs, None, opts, &mut g)?.ensemble;
        trace.push(CycleTrace {
            rmse: slow_rmse(&ens, p.n, &data.truth[m]),
            alpha: 0.0,
            sigma: 0.0,
            r: data.obs_var,
        });
    }
    Ok(FilterOutcome::finish(trace, discard, None))
}

// ---------------------------------------------------------------- experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StochParamConfig {
    pub model: TwoLayerL96Params,
    /// RK4 step of the two-layer truth.
    pub truth_h: f64,
    /// Sampling step of the training data for residuals.
    pub fit_dt: f64,
    pub fit_length: f64,
    pub spinup: f64,
    /// Observe every `obs_stride`-th slow site.
    pub obs_stride: usize,
    pub obs_var: f64,
    pub dt_obs_grid: Vec<f64>,
    pub cycles: usize,
    pub discard: usize,
    /// Ensemble size of the offline filters.
    pub ensemble: usize,
    /// Integration step of the reduced models.
    pub reduced_h: f64,
    pub inflation: f64,
    pub online: OnlineConfig,
    pub cubic_filter: bool,
    pub full_model_filter: bool,
    pub full_ensemble: usize,
    pub climate_length: f64,
    /// Largest ACF lag in time units (sampled at `fit_dt`).
    pub acf_max_lag: f64,
    pub pdf_bins: usize,
}

impl Default for StochParamConfig {
    fn default() -> Self {
        Self {
            model: TwoLayerL96Params::default(),
            truth_h: 0.001,
            fit_dt: 0.005,
            fit_length: 500.0,
            spinup: 10.0,
            obs_stride: 2,
            obs_var: 0.1,
            dt_obs_grid: vec![0.05, 0.1, 0.2, 0.4],
            cycles: 1500,
            discard: 300,
            ensemble: 18,
            reduced_h: 0.005,
            inflation: 1.0,
            online: OnlineConfig::default(),
            cubic_filter: true,
            full_model_filter: false,
            full_ensemble: 528,
            climate_length: 2000.0,
            acf_max_lag: 4.0,
            pdf_bins: 100,
        }
    }
}

fn multiple_of(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * r.max(1.0) && k >= 1.0).then_some(k as usize)
}

impl StochParamConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.online.adaptive.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if multiple_of(self.fit_dt, self.truth_h).is_none() {
            return fail("fit_dt must be a multiple of truth_h".into());
        }
        for &dt in &self.dt_obs_grid {
            if multiple_of(dt, self.truth_h).is_none() {
                return fail(format!("dt_obs {dt} must be a multiple of truth_h"));
            }
        }
        if self.dt_obs_grid.is_empty() || self.cycles <= self.discard {
            return fail("need a non-empty dt_obs_grid and cycles > discard".into());
        }
        if self.ensemble < 2 || self.online.ensemble < 2 || self.full_ensemble < 2 {
            return fail("ensemble sizes must be >= 2".into());
        }
        if self.obs_stride == 0 || self.obs_stride > self.model.n {
            return fail("obs_stride must be in 1..=n".into());
        }
        if !(self.obs_var > 0.0) || !(self.reduced_h > 0.0) || !(self.inflation > 0.0) {
            return fail("obs_var, reduced_h and inflation must be > 0".into());
        }
        if !(self.fit_length > 0.0) || !(self.climate_length > self.acf_max_lag) {
            return fail("fit_length must be > 0 and climate_length > acf_max_lag".into());
        }
        Ok(())
    }

    fn obs_sites(&self) -> Vec<usize> {
        (0..self.model.n).step_by(self.obs_stride).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: &'static str,
    pub dt_obs: f64,
    pub outcome: FilterOutcome,
    pub alpha: f64,
    pub sigma: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub labels: Vec<&'static str>,
    pub grid: Vec<f64>,
    pub pdfs: Vec<Vec<f64>>,
    pub acfs: Vec<Vec<f64>>,
    /// L1 distance of each pdf to the first (the full model).
    pub l1: Vec<f64>,
    /// Free runs that blew up, with the time.
    pub blowups: Vec<(&'static str, f64)>,
}

impl Climatology {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }
}

#[derive(Debug, Clone)]
pub struct StochParamRun {
    pub cubic: OfflineFit,
    pub offline: OfflineFit,
    pub sweep: Vec<SweepRow>,
    pub online_alpha: f64,
    pub online_sigma: f64,
    pub climatology: Climatology,
    pub fit_table: ResultTable,
    pub filter_table: ResultTable,
    pub trace_table: ResultTable,
    pub pdf_table: ResultTable,
    pub acf_table: ResultTable,
}

impl StochParamRun {
    pub fn rmse(&self, variant: &str, dt_obs: f64) -> Option<f64> {
        self.sweep
            .iter()
            .find(|r| r.variant == variant && (r.dt_obs - dt_obs).abs() < 1e-12)
            .map(|r| r.outcome.rmse)
    }
}

/// Pooled histogram densities on a grid fixed by the first sample set, and
/// site-averaged autocorrelations.
pub fn compare_climatology(
    runs: &[(&'static str, &SlowRun)],
    bins: usize,
    max_lag: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let reference = runs[0].1.pooled();
    let (grid, p0) = diagnostics::density1d(&reference, DensityMethod::Histogram { bins }, None)?;
    let mut pdfs = vec![p0];
    for (_, r) in &runs[1..] {
        pdfs.push(diagnostics::density1d(&r.pooled(), DensityMethod::Histogram { bins }, Some(&grid))?.1);
    }
    let acfs = runs
        .iter()
        .map(|(_, r)| {
            let n = r.states[0].len();
            let mut mean = vec![0.0; max_lag + 1];
            for i in 0..n {
                let a = diagnostics::acf(&r.site(i), max_lag)?;
                mean.iter_mut().zip(a).for_each(|(m, v)| *m += v / n as f64);
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>>>()?;
    let l1 = pdfs.iter().map(|p| diagnostics::l1_distance(&grid, &pdfs[0], p)).collect();
    Ok((grid, pdfs, acfs, l1))
}

pub fn run_stoch_param_experiment(cfg: &StochParamConfig, seed: u64) -> Result<StochParamRun> {
    cfg.validate()?;
    let p = cfg.model;
    let every = multiple_of(cfg.fit_dt, cfg.truth_h).unwrap();

    // training data and offline fits
    let train = two_layer_slow_run(&p, cfg.fit_length, cfg.truth_h, every, cfg.spinup, &mut rng::stream(seed, "ex3_train", 0))?;
    let res = residual_series(&train, p.forcing)?;
    let cubic = fit_cubic_ar1(&res)?;
    let offline = fit_linear_white(&res)?;
    drop(train);

    let offline_model = ReducedModel {
        n: p.n,
        forcing: p.forcing,
        closure: Closure::Linear {
            alpha: offline.alpha,
            sigma: offline.sigma,
        },
        h: cfg.reduced_h,
    };
    let cubic_model = ReducedModel {
        closure: Closure::CubicAr1(cubic),
        ..offline_model
    };
    let opts = EtkfOptions {
        inflation: cfg.inflation,
    };

    // observation-interval sweep
    let per_dt = exec::try_map_indexed(cfg.dt_obs_grid.len(), |i| -> Result<Vec<SweepRow>> {
        let dt = cfg.dt_obs_grid[i];
        let s = rng::child_seed(seed, "ex3_dt", i as u64);
        let stride = multiple_of(dt, cfg.truth_h).unwrap();
        let run = two_layer_slow_run(&p, dt * cfg.cycles as f64, cfg.truth_h, stride, cfg.spinup, &mut rng::stream(s, "truth", 0))?;
        let data = TwinData::from_run(&run, cfg.obs_sites(), cfg.obs_var, &mut rng::stream(s, "obs", 0))?;
        let mut rows = Vec::new();
        let off = offline_filter(&data, &offline_model, cfg.ensemble, &opts, cfg.discard, s)?;
        rows.push(SweepRow {
            variant: "offline",
            dt_obs: dt,
            alpha: offline.alpha,
            sigma: offline.sigma,
            r: cfg.obs_var,
            outcome: off,
        });
        let on = online_filter(&data, p.forcing, cfg.reduced_h, &cfg.online, &opts, cfg.discard, s)?;
        let (alpha, sigma, r) = on.mean_params(cfg.discard);
        rows.push(SweepRow {
            variant: "online",
            dt_obs: dt,
            alpha,
            sigma,
            r,
            outcome: on,
        });
        if cfg.cubic_filter {
            let cu = offline_filter(&data, &cubic_model, cfg.ensemble, &opts, cfg.discard, s)?;
            rows.push(SweepRow {
                variant: "cubic_ar1",
                dt_obs: dt,
                alpha: cubic.alpha,
                sigma: cubic.sigma,
                r: cfg.obs_var,
                outcome: cu,
            });
        }
        if cfg.full_model_filter {
            let full = full_model_filter(&data, &p, cfg.truth_h, cfg.full_ensemble, &opts, cfg.discard, s)?;
            rows.push(SweepRow {
                variant: "full",
                dt_obs: dt,
                alpha: 0.0,
                sigma: 0.0,
                r: cfg.obs_var,
                outcome: full,
            });
        }
        Ok(rows)
    })?;
    let sweep: Vec<SweepRow> = per_dt.into_iter().flatten().collect();

    // online parameters from the finest observation interval
    let finest = cfg
        .dt_obs_grid
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let online_row = sweep
        .iter()
        .find(|r| r.variant == "online" && r.dt_obs == finest)
        .expect("online row exists");
    if online_row.outcome.diverged_at.is_some() {
        return Err(Error::Divergence(format!("online filter diverged at dt_obs = {finest}")));
    }
    let (online_alpha, online_sigma) = (online_row.alpha, online_row.sigma);
    let online_model = ReducedModel {
        closure: Closure::Linear {
            alpha: online_alpha,
            sigma: online_sigma,
        },
        ..offline_model
    };

    // climatology
    let clim_models: [(&'static str, Option<&ReducedModel>); 4] =
        [("full", None), ("offline", Some(&offline_model)), ("online", Some(&online_model)), ("cubic_ar1", Some(&cubic_model))];
    let runs = exec::map_indexed(clim_models.len(), |i| {
        let mut g = rng::stream(seed, "ex3_climate", i as u64);
        match clim_models[i].1 {
            None => two_layer_slow_run(&p, cfg.climate_length, cfg.truth_h, every, cfg.spinup, &mut g),
            Some(m) => free_run(m, cfg.climate_length, cfg.fit_dt, cfg.spinup, &mut g),
        }
    });
    let mut ok_runs = Vec::new();
    let mut blowups = Vec::new();
    for ((label, _), r) in clim_models.iter().zip(&runs) {
        match r {
            Ok(run) => ok_runs.push((*label, run)),
            Err(Error::Blowup { time }) if *label != "full" => blowups.push((*label, *time)),
            Err(e) => return Err(Error::Domain(format!("{label} free run failed: {e}"))),
        }
    }
    let max_lag = (cfg.acf_max_lag / cfg.fit_dt).round() as usize;
    let (grid, pdfs, acfs, l1) = compare_climatology(&ok_runs, cfg.pdf_bins, max_lag)?;
    let climatology = Climatology {
        labels: ok_runs.iter().map(|(l, _)| *l).collect(),
        grid,
        pdfs,
        acfs,
        l1,
        blowups,
    };

    // tables
    let mut fit_table = ResultTable::labeled("ex3_fits", "method", &["zeta", "alpha", "beta", "gamma", "phi", "sigma"]);
    fit_table.push_labeled("cubic_ar1", vec![cubic.zeta, cubic.alpha, cubic.beta, cubic.gamma, cubic.phi, cubic.sigma])?;
    fit_table.push_labeled("offline", vec![0.0, offline.alpha, 0.0, 0.0, 0.0, offline.sigma])?;
    fit_table.push_labeled("online", vec![0.0, online_alpha, 0.0, 0.0, 0.0, online_sigma])?;

    let mut filter_table = ResultTable::labeled("ex3_filters", "variant", &["dt_obs", "rmse", "diverged", "alpha", "sigma", "r"]);
    for r in &sweep {
        filter_table.push_labeled(
            r.variant,
            vec![r.dt_obs, r.outcome.rmse, f64::from(u8::from(r.outcome.diverged_at.is_some())), r.alpha, r.sigma, r.r],
        )?;
    }
    let mut trace_table = ResultTable::new("ex3_online_trace", &["m", "rmse", "alpha", "sigma", "r"]);
    for (m, c) in online_row.outcome.trace.iter().enumerate() {
        trace_table.push(vec![(m + 1) as f64, c.rmse, c.alpha, c.sigma, c.r])?;
    }
    let mut pdf_cols = vec!["x".to_string()];
    pdf_cols.extend(climatology.labels.iter().map(|l| format!("pdf_{l}")));
    let mut pdf_table = ResultTable::with_columns("ex3_pdf", pdf_cols);
    for (i, x) in climatology.grid.iter().enumerate() {
        let mut row = vec![*x];
        row.extend(climatology.pdfs.iter().map(|p| p[i]));
        pdf_table.push(row)?;
    }
    let mut acf_cols = vec!["lag".to_string()];
    acf_cols.extend(climatology.labels.iter().map(|l| format!("acf_{l}")));
    let mut acf_table = ResultTable::with_columns("ex3_acf", acf_cols);
    for l in 0..=max_lag {
        let mut row = vec![l as f64 * cfg.fit_dt];
        row.extend(climatology.acfs.iter().map(|a| a[l]));
        acf_table.push(row)?;
    }

    Ok(StochParamRun {
        cubic,
        offline,
        sweep,
        online_alpha,
        online_sigma,
        climatology,
        fit_table,
        filter_table,
        trace_table,
        pdf_table,
        acf_table,
    })
}
