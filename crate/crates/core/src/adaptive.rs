//! Adaptive estimation of additive model-error and observation-noise
//! covariances with a secondary Kalman filter on lagged innovation products.
//!
//! The unknowns are `θ = (q1, [q2,] r)` with `Q(θ) = q1 B₁ [+ q2 B₂]` and
//! `R(θ) = r R₀`. Each cycle the primary ETKF runs with the previous estimate,
//! then pseudo-observations `σ = d_mᵀ S d_{m-ℓ}` are assimilated for every lag
//! `ℓ < L`. Their expectation is modelled linearly in θ from the primary
//! filter's forecast covariance, gain and an ensemble estimate of the tangent
//! map between cycles; the noise covariance uses the Gaussian fourth-moment
//! identity.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::kalman::{etkf_analysis, Ensemble, EtkfAnalysis, EtkfOptions, GaussianBelief, LinearObs};
use crate::linalg::{cholesky_with_jitter, symmetrize};
use crate::models::{l96_drift_into, Rk4};
use crate::rng;
use crate::table::ResultTable;
use crate::{Error, Result};

/// `d = v - H x̄ᵇ`.
pub fn innovation(v: &DVector<f64>, mean: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    v - h * mean
}

/// Symmetric circulant with `q1` on the diagonal and `q2` on the first cyclic
/// off-diagonals.
pub fn assemble_banded_q(q1: f64, q2: f64, n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::identity(n, n) * q1;
    q += cyclic_band(n) * q2;
    q
}

/// Ones on the first cyclic super- and sub-diagonals.
pub fn cyclic_band(n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        b[(i, (i + 1) % n)] = 1.0;
        b[((i + 1) % n, i)] = 1.0;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub q1: f64,
    pub q2: f64,
    pub r: f64,
}

/// How θ maps to `(Q, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStructure {
    pub h: DMatrix<f64>,
    pub q_diag: DMatrix<f64>,
    pub q_band: Option<DMatrix<f64>>,
    pub r_basis: DMatrix<f64>,
}

impl NoiseStructure {
    /// `Q = assemble_banded_q(q1, q2, n)`, `R = r I`, observation operator `h`.
    pub fn banded(h: DMatrix<f64>) -> Self {
        let n = h.ncols();
        let m = h.nrows();
        Self {
            h,
            q_diag: DMatrix::identity(n, n),
            q_band: Some(cyclic_band(n)),
            r_basis: DMatrix::identity(m, m),
        }
    }

    /// `Q = q1 · diag(mask)`, `R = r I`.
    pub fn masked(h: DMatrix<f64>, mask: &[f64]) -> Self {
        let m = h.nrows();
        Self {
            q_diag: DMatrix::from_diagonal(&DVector::from_column_slice(mask)),
            h,
            q_band: None,
            r_basis: DMatrix::identity(m, m),
        }
    }

    pub fn n_params(&self) -> usize {
        2 + usize::from(self.q_band.is_some())
    }

    pub fn r_index(&self) -> usize {
        self.n_params() - 1
    }

    fn q_bases(&self) -> Vec<&DMatrix<f64>> {
        let mut v = vec![&self.q_diag];
        if let Some(b) = &self.q_band {
            v.push(b);
        }
        v
    }

    pub fn q(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut q = &self.q_diag * theta[0];
        if let Some(b) = &self.q_band {
            q += b * theta[1];
        }
        q
    }

    pub fn r(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        &self.r_basis * theta[self.r_index()]
    }

    pub fn params(&self, theta: &DVector<f64>) -> NoiseParams {
        NoiseParams {
            q1: theta[0],
            q2: if self.q_band.is_some() { theta[1] } else { 0.0 },
            r: theta[self.r_index()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    /// Number of lags `L` (lags `0..L-1` are assimilated).
    pub lags: usize,
    /// Random-walk variance per cycle as a fraction of the squared initial scale.
    pub rw_scale: f64,
    /// Initial θ variance as a fraction of the squared initial scale.
    pub initial_var_scale: f64,
    pub r_min: f64,
    /// Add `Σ d_i d_{i+1}` (cyclic) to the lag-0 pseudo-observations.
    pub band_pseudo_obs: bool,
    /// Include the steady-state response of the forecast covariance to θ.
    pub steady_feedback: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            lags: 2,
            rw_scale: 1e-4,
            initial_var_scale: 1.0,
            r_min: 1e-6,
            band_pseudo_obs: true,
            steady_feedback: true,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lags < 1 {
            return Err(Error::Config("adaptive lags must be >= 1".into()));
        }
        if !(self.rw_scale >= 0.0) || !(self.initial_var_scale > 0.0) || !(self.r_min > 0.0) {
            return Err(Error::Config(
                "adaptive rw_scale >= 0, initial_var_scale > 0 and r_min > 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted sum `Σ w a_i b_j` over sparse `(i, j, w)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub entries: Vec<(usize, usize, f64)>,
}

impl Selector {
    pub fn entry(i: usize, j: usize) -> Self {
        Self {
            entries: vec![(i, j, 1.0)],
        }
    }

    pub fn trace(m: usize) -> Self {
        Self {
            entries: (0..m).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn cyclic_band(m: usize) -> Self {
        Self {
            entries: (0..m).map(|i| (i, (i + 1) % m, 1.0)).collect(),
        }
    }

    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.entries.iter().map(|&(i, j, w)| w * a[i] * b[j]).sum()
    }

    /// `E[aᵀ S b]` given `C = E[a bᵀ]`.
    pub fn expect(&self, c: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(i, j, w)| w * c[(i, j)]).sum()
    }

    /// Gaussian covariance of `aᵀ S b` and `aᵀ T b` for zero-mean jointly
    /// Gaussian `a, b` with `Caa`, `Cbb` and `Cab = E[a bᵀ]`.
    pub fn gaussian_cov(&self, other: &Selector, caa: &DMatrix<f64>, cbb: &DMatrix<f64>, cab: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for &(i, j, w) in &self.entries {
            for &(k, l, u) in &other.entries {
                s += w * u * (caa[(i, k)] * cbb[(j, l)] + cab[(i, l)] * cab[(k, j)]);
            }
        }
        s
    }
}

/// The pseudo-observations used at lag `ℓ`.
pub fn selectors(m: usize, lag: usize, band: bool) -> Vec<Selector> {
    if lag == 0 {
        let mut v: Vec<Selector> = (0..m).map(|i| Selector::entry(i, i)).collect();
        if band && m >= 3 {
            v.push(Selector::cyclic_band(m));
        }
        v
    } else {
        vec![Selector::trace(m)]
    }
}

/// Primary-filter quantities of one assimilation cycle.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    /// Innovation against the forecast mean before additive noise.
    pub d: DVector<f64>,
    /// Forecast covariance before additive noise.
    pub pb: DMatrix<f64>,
    /// Gain of this cycle's analysis.
    pub gain: DMatrix<f64>,
    /// Tangent map from the previous analysis to this forecast, if known.
    pub f_map: Option<DMatrix<f64>>,
    /// θ used by this cycle's analysis.
    pub theta_used: DVector<f64>,
    /// Sensitivity of `pb` to each θ component.
    pub sens: Vec<DMatrix<f64>>,
}

/// Steady response `X_i = Σ_j Aʲ G_i (Aʲ)ᵀ` of the forecast covariance to
/// each parameter under the frozen-gain recursion `A = F (I - K H)`, with
/// `G_q = A B Aᵀ` and `G_r = F K R₀ Kᵀ Fᵀ`. Summed by doubling over 64 terms;
/// when the map is not contracting only the one-step term is kept.
pub fn steady_sensitivities(
    structure: &NoiseStructure,
    f_map: &DMatrix<f64>,
    prev_gain: &DMatrix<f64>,
    steady: bool,
) -> Vec<DMatrix<f64>> {
    let n = f_map.nrows();
    let a = f_map * (DMatrix::identity(n, n) - prev_gain * &structure.h);
    let mut g: Vec<DMatrix<f64>> = structure.q_bases().iter().map(|b| &a * *b * a.transpose()).collect();
    let fk = f_map * prev_gain;
    g.push(&fk * &structure.r_basis * fk.transpose());
    if !steady {
        return g;
    }
    let mut ak = a.clone();
    let mut xs = g.clone();
    for _ in 0..6 {
        for x in xs.iter_mut() {
            *x += &ak * &*x * ak.transpose();
        }
        ak = &ak * &ak;
    }
    if ak.norm() > 1.0 || xs.iter().any(|x| !x.iter().all(|v| v.is_finite())) {
        return g;
    }
    xs
}

#[derive(Debug, Clone)]
pub struct PseudoObs {
    pub sigma: DVector<f64>,
    /// θ-independent part of the expectation.
    pub offset: DVector<f64>,
    pub f: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// Lag-ℓ products of `records` (oldest first, newest last) and their linear
/// model `E[σ] = offset + F θ`. Returns `None` while the buffer is too short.
pub fn build_pseudo_obs(
    records: &[CycleRecord],
    structure: &NoiseStructure,
    theta_hat: &DVector<f64>,
    lag: usize,
    band: bool,
) -> Result<Option<PseudoObs>> {
    if records.len() < lag + 1 {
        return Ok(None);
    }
    let newest = records.len() - 1;
    let old = newest - lag;
    let h = &structure.h;
    let m = h.nrows();
    let n = h.ncols();
    let p = structure.n_params();
    let ri = structure.r_index();
    let qb = structure.q_bases();

    // Lag-0 expectation pieces for a record: returns (M0, [M_i]).
    let lag0 = |rec: &CycleRecord| {
        let mut base = rec.pb.clone();
        for (i, x) in rec.sens.iter().enumerate() {
            base -= x * rec.theta_used[i];
        }
        let m0 = h * base * h.transpose();
        let mut mi = Vec::with_capacity(p);
        for i in 0..p {
            let mut cov = if i < ri { qb[i].clone() } else { DMatrix::zeros(n, n) };
            if let Some(x) = rec.sens.get(i) {
                cov += x;
            }
            let mut hm = h * cov * h.transpose();
            if i == ri {
                hm += &structure.r_basis;
            }
            mi.push(hm);
        }
        (m0, mi)
    };
    let eval = |m0: &DMatrix<f64>, mi: &[DMatrix<f64>]| {
        let mut c = m0.clone();
        for (i, x) in mi.iter().enumerate() {
            c += x * theta_hat[i];
        }
        c
    };

    let (n0, ni) = lag0(&records[newest]);
    let c0_new = eval(&n0, &ni);
    let (m0, mi, caa, cbb, cab) = if lag == 0 {
        (n0, ni, c0_new.clone(), c0_new.clone(), c0_new)
    } else {
        // Ψ = F_m (I - K_{m-1} H) F_{m-1} ... (I - K_{o+1} H) F_{o+1}
        let mut psi = DMatrix::identity(n, n);
        for j in (old + 1..=newest).rev() {
            let f = match &records[j].f_map {
                Some(f) => f,
                None => return Ok(None),
            };
            psi = psi * f;
            if j - 1 > old {
                psi = psi * (DMatrix::identity(n, n) - &records[j - 1].gain * h);
            }
        }
        let rec = &records[old];
        let ikh = DMatrix::identity(n, n) - &rec.gain * h;
        let hpsi = h * &psi;
        let mut base = rec.pb.clone();
        for (i, x) in rec.sens.iter().enumerate() {
            base -= x * rec.theta_used[i];
        }
        let m0 = &hpsi * &ikh * base * h.transpose();
        let mut mi = Vec::with_capacity(p);
        for i in 0..p {
            let mut cov = if i < ri { qb[i].clone() } else { DMatrix::zeros(n, n) };
            if let Some(x) = rec.sens.get(i) {
                cov += x;
            }
            let mut t = &ikh * cov * h.transpose();
            if i == ri {
                t -= &rec.gain * &structure.r_basis;
            }
            mi.push(&hpsi * t);
        }
        let (o0, oi) = lag0(rec);
        let cbb = eval(&o0, &oi);
        let cab = eval(&m0, &mi);
        (m0, mi, c0_new, cbb, cab)
    };

    let sel = selectors(m, lag, band);
    let s = sel.len();
    let d_new = &records[newest].d;
    let d_old = &records[old].d;
    let sigma = DVector::from_iterator(s, sel.iter().map(|x| x.eval(d_new, d_old)));
    let offset = DVector::from_iterator(s, sel.iter().map(|x| x.expect(&m0)));
    let f = DMatrix::from_fn(s, p, |a, i| sel[a].expect(&mi[i]));
    let mut w = DMatrix::from_fn(s, s, |a, b| sel[a].gaussian_cov(&sel[b], &caa, &cbb, &cab));
    symmetrize(&mut w);
    Ok(Some(PseudoObs { sigma, offset, f, w }))
}

/// Secondary filter state and the history it needs.
#[derive(Debug, Clone)]
pub struct AdaptiveEstimator {
    pub structure: NoiseStructure,
    pub cfg: AdaptiveConfig,
    pub theta: GaussianBelief,
    rw_var: DVector<f64>,
    records: VecDeque<CycleRecord>,
    prev_analysis: Option<DMatrix<f64>>,
    /// Times r was clipped at `r_min`.
    pub clip_count: usize,
    /// Times the band parameter was projected to keep Q PSD.
    pub projection_count: usize,
    /// Secondary updates skipped because the innovation covariance was singular.
    pub skipped: usize,
}

impl AdaptiveEstimator {
    pub fn new(structure: NoiseStructure, cfg: AdaptiveConfig, theta0: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if theta0.len() != structure.n_params() {
            return Err(Error::Config(format!(
                "expected {} initial noise parameters, got {}",
                structure.n_params(),
                theta0.len()
            )));
        }
        if !(theta0[structure.r_index()] > 0.0) || theta0[0] < 0.0 {
            return Err(Error::Config("initial r must be > 0 and q1 >= 0".into()));
        }
        // Parameters starting at zero borrow the scale of q1.
        let fallback = if theta0[0] > 0.0 { theta0[0] } else { theta0[structure.r_index()] };
        let scale = DVector::from_iterator(
            theta0.len(),
            theta0.iter().map(|&t| if t != 0.0 { t.abs() } else { fallback }),
        );
        let var0 = scale.map(|s| cfg.initial_var_scale * s * s);
        let rw_var = scale.map(|s| cfg.rw_scale * s * s);
        Ok(Self {
            theta: GaussianBelief {
                mean: DVector::from_column_slice(theta0),
                cov: DMatrix::from_diagonal(&var0),
            },
            structure,
            cfg,
            rw_var,
            records: VecDeque::new(),
            prev_analysis: None,
            clip_count: 0,
            projection_count: 0,
            skipped: 0,
        })
    }

    pub fn params(&self) -> NoiseParams {
        self.structure.params(&self.theta.mean)
    }

    pub fn q(&self) -> DMatrix<f64> {
        self.structure.q(&self.theta.mean)
    }

    pub fn r(&self) -> DMatrix<f64> {
        self.structure.r(&self.theta.mean)
    }

    /// One cycle: ETKF with the current `(Q, R)`, then the secondary update.
    pub fn assimilate<R: Rng + ?Sized>(
        &mut self,
        forecast: &Ensemble,
        v: &DVector<f64>,
        opts: &EtkfOptions,
        rng: &mut R,
    ) -> Result<EtkfAnalysis> {
        let h = self.structure.h.clone();
        let d = innovation(v, &forecast.mean(), &h);
        let pb = forecast.cov();
        let obs = LinearObs::new(h, self.r())?;
        let q = self.q();
        let an = etkf_analysis(forecast, v, &obs, Some(&q), opts, rng)?;
        let f_map = self
            .prev_analysis
            .as_ref()
            .map(|xa| forecast.perturbations() * pinv(xa));
        self.push_record(d, pb, an.gain.clone(), f_map);
        self.prev_analysis = Some(an.ensemble.perturbations());
        self.secondary_update()?;
        Ok(an)
    }

    /// Appends a cycle to the lag buffer, computing θ-sensitivities from the
    /// previous cycle's gain.
    pub fn push_record(&mut self, d: DVector<f64>, pb: DMatrix<f64>, gain: DMatrix<f64>, f_map: Option<DMatrix<f64>>) {
        let sens = match (&f_map, self.records.back()) {
            (Some(f), Some(prev)) => steady_sensitivities(&self.structure, f, &prev.gain, self.cfg.steady_feedback),
            _ => Vec::new(),
        };
        self.records.push_back(CycleRecord {
            d,
            pb,
            gain,
            f_map,
            theta_used: self.theta.mean.clone(),
            sens,
        });
        while self.records.len() > self.cfg.lags {
            self.records.pop_front();
        }
    }

    pub fn records(&self) -> Vec<CycleRecord> {
        self.records.iter().cloned().collect()
    }

    /// Random-walk forecast of θ, then one update per lag.
    pub fn secondary_update(&mut self) -> Result<()> {
        for i in 0..self.rw_var.len() {
            self.theta.cov[(i, i)] += self.rw_var[i];
        }
        let records: Vec<CycleRecord> = self.records.iter().cloned().collect();
        for lag in 0..self.cfg.lags {
            let po = match build_pseudo_obs(&records, &self.structure, &self.theta.mean, lag, self.cfg.band_pseudo_obs)? {
                Some(p) => p,
                None => continue,
            };
            let pf = &self.theta.cov * po.f.transpose();
            let mut s = &po.f * &pf + &po.w;
            symmetrize(&mut s);
            let chol = match cholesky_with_jitter(&s) {
                Ok((c, _)) => c,
                Err(_) => {
                    self.skipped += 1;
                    continue;
                }
            };
            let gain = chol.solve(&pf.transpose()).transpose();
            let innov = &po.sigma - &po.offset - &po.f * &self.theta.mean;
            self.theta.mean += &gain * innov;
            let p = self.theta.dim();
            let ikh = DMatrix::identity(p, p) - &gain * &po.f;
            let mut cov = &ikh * &self.theta.cov * ikh.transpose() + &gain * &po.w * gain.transpose();
            symmetrize(&mut cov);
            self.theta.cov = cov;
            self.constrain();
        }
        Ok(())
    }

    fn constrain(&mut self) {
        let t = &mut self.theta.mean;
        if t[0] < 0.0 {
            t[0] = 0.0;
        }
        if self.structure.q_band.is_some() && t[0] < 2.0 * t[1].abs() {
            t[1] = 0.5 * t[0] * t[1].signum();
            self.projection_count += 1;
        }
        let ri = self.structure.r_index();
        if t[ri] < self.cfg.r_min {
            t[ri] = self.cfg.r_min;
            self.clip_count += 1;
        }
    }
}

/// Moore–Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * a.nrows().max(a.ncols()) as f64;
    svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

// ---------------------------------------------------------------- experiment

/// Twin experiment: truth from Lorenz-96 with `truth_theta`, forecasts with
/// the misspecified `model_theta`, ETKF with adaptive banded `Q` and `R = rI`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveEtkfConfig {
    pub n: usize,
    pub forcing: f64,
    pub truth_theta: f64,
    pub model_theta: f64,
    pub dt_obs: f64,
    pub h: f64,
    pub obs_var: f64,
    pub spinup: f64,
    pub cycles: usize,
    /// Cycles left out of the time means.
    pub discard: usize,
    pub ensembles: Vec<usize>,
    /// Initial `(q1, q2, r)`.
    pub initial: [f64; 3],
    /// Cycles with the initial `(Q, R)` before the secondary filter starts.
    pub warmup: usize,
    /// Site whose posterior-mean error is reported (0-based).
    pub site: usize,
    pub adaptive: AdaptiveConfig,
}

impl Default for AdaptiveEtkfConfig {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
            truth_theta: 1.0,
            model_theta: 1.2,
            dt_obs: 0.05,
            h: 0.01,
            obs_var: 1.0,
            spinup: 10.0,
            cycles: 2000,
            discard: 200,
            ensembles: vec![10, 20],
            initial: [0.1, 0.0, 0.5],
            warmup: 20,
            site: 9,
            adaptive: AdaptiveConfig::default(),
        }
    }
}

impl AdaptiveEtkfConfig {
    pub fn validate(&self) -> Result<()> {
        self.adaptive.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n < 4 || self.site >= self.n {
            return fail("need n >= 4 and site < n");
        }
        if !(self.h > 0.0 && self.dt_obs >= self.h && self.obs_var > 0.0 && self.spinup >= 0.0) {
            return fail("need h > 0, dt_obs >= h, obs_var > 0 and spinup >= 0");
        }
        if self.discard >= self.cycles {
            return fail("discard must be smaller than cycles");
        }
        if self.ensembles.is_empty() || self.ensembles.iter().any(|k| *k < 2) {
            return fail("ensemble sizes must be >= 2");
        }
        if !(self.initial[2] > 0.0) || self.initial[0] < 2.0 * self.initial[1].abs() {
            return fail("initial r must be > 0 and q1 >= 2|q2|");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveCycle {
    pub q1: f64,
    pub q2: f64,
    pub r: f64,
    pub rmse: f64,
    /// Posterior-mean error at the reported site.
    pub site_error: f64,
    pub clip_count: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRunSummary {
    pub ensemble: usize,
    pub mean_abs_r_error: f64,
    pub mean_q1: f64,
    pub mean_abs_q2: f64,
    pub site_rmse: f64,
    pub rmse: f64,
    pub trace: Vec<AdaptiveCycle>,
}

#[derive(Debug, Clone)]
pub struct AdaptiveEtkfRun {
    pub runs: Vec<AdaptiveRunSummary>,
    pub trace_table: ResultTable,
    pub summary_table: ResultTable,
}

/// L96 states every `dt_obs` after the spin-up, starting from `N(0, 1)`.
fn l96_truth<R: Rng + ?Sized>(cfg: &AdaptiveEtkfConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let steps = (cfg.dt_obs / cfg.h).round().max(1.0) as usize;
    let hs = cfg.dt_obs / steps as f64;
    let mut x: Vec<f64> = (0..cfg.n).map(|_| cfg.forcing + rng.sample::<f64, _>(StandardNormal)).collect();
    let mut rk = Rk4::new(cfg.n);
    let mut f = |_t: f64, s: &[f64], o: &mut [f64]| l96_drift_into(s, cfg.truth_theta, cfg.forcing, o);
    for i in 0..(cfg.spinup / hs).round() as usize {
        rk.step(&mut f, i as f64 * hs, hs, &mut x)?;
    }
    let mut out = Vec::with_capacity(cfg.cycles);
    for m in 0..cfg.cycles {
        for s in 0..steps {
            rk.step(&mut f, (m * steps + s) as f64 * hs, hs, &mut x)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn adaptive_filter_run(
    cfg: &AdaptiveEtkfConfig,
    truth: &[Vec<f64>],
    obs: &[DVector<f64>],
    k: usize,
    seed: u64,
) -> Result<AdaptiveRunSummary> {
    let n = cfg.n;
    let steps = (cfg.dt_obs / cfg.h).round().max(1.0) as usize;
    let hs = cfg.dt_obs / steps as f64;
    let mut g = rng::stream(seed, "adaptive_etkf", k as u64);
    let sd = cfg.obs_var.sqrt();
    let members = DMatrix::from_fn(n, k, |i, _| obs[0][i] + sd * g.sample::<f64, _>(StandardNormal));
    let mut ens = Ensemble::new(members)?;
    let mut est = AdaptiveEstimator::new(NoiseStructure::banded(DMatrix::identity(n, n)), cfg.adaptive, &cfg.initial)?;
    let opts = EtkfOptions::default();
    let mut trace = Vec::with_capacity(obs.len());
    for (m, v) in obs.iter().enumerate() {
        if m > 0 {
            ens.forecast(|_, z| {
                let mut rk = Rk4::new(n);
                let mut f = |_t: f64, s: &[f64], o: &mut [f64]| l96_drift_into(s, cfg.model_theta, cfg.forcing, o);
                for s in 0..steps {
                    rk.step(&mut f, ((m - 1) * steps + s) as f64 * hs, hs, z)?;
                }
                Ok(())
            })
            .map_err(|e| Error::Divergence(format!("ensemble of {k} failed at cycle {m}: {e}")))?;
        }
        let an = if m < cfg.warmup {
            let lo = LinearObs::new(est.structure.h.clone(), est.r())?;
            etkf_analysis(&ens, v, &lo, Some(&est.q()), &opts, &mut g)?
        } else {
            est.assimilate(&ens, v, &opts, &mut g)?
        };
        ens = an.ensemble;
        let mean = ens.mean();
        let rmse = ((0..n).map(|i| (mean[i] - truth[m][i]).powi(2)).sum::<f64>() / n as f64).sqrt();
        let p = est.params();
        trace.push(AdaptiveCycle {
            q1: p.q1,
            q2: p.q2,
            r: p.r,
            rmse,
            site_error: mean[cfg.site] - truth[m][cfg.site],
            clip_count: est.clip_count,
        });
    }
    let kept = &trace[cfg.discard..];
    let avg = |f: &dyn Fn(&AdaptiveCycle) -> f64| kept.iter().map(f).sum::<f64>() / kept.len() as f64;
    Ok(AdaptiveRunSummary {
        ensemble: k,
        mean_abs_r_error: avg(&|c| (c.r - cfg.obs_var).abs()),
        mean_q1: avg(&|c| c.q1),
        mean_abs_q2: avg(&|c| c.q2.abs()),
        site_rmse: avg(&|c| c.site_error * c.site_error).sqrt(),
        rmse: avg(&|c| c.rmse),
        trace,
    })
}

pub fn run_adaptive_experiment(cfg: &AdaptiveEtkfConfig, seed: u64) -> Result<AdaptiveEtkfRun> {
    cfg.validate()?;
    let truth = l96_truth(cfg, &mut rng::stream(seed, "ex2_truth", 0))?;
    let mut g = rng::stream(seed, "ex2_obs", 0);
    let sd = cfg.obs_var.sqrt();
    let obs: Vec<DVector<f64>> = truth
        .iter()
        .map(|x| DVector::from_fn(cfg.n, |i, _| x[i] + sd * g.sample::<f64, _>(StandardNormal)))
        .collect();
    let runs = exec::try_map_indexed(cfg.ensembles.len(), |i| {
        adaptive_filter_run(cfg, &truth, &obs, cfg.ensembles[i], rng::child_seed(seed, "ex2_filter", i as u64))
    })?;

    let mut trace_table = ResultTable::labeled(
        "ex2_trace",
        "ensemble",
        &["m", "q1", "q2", "r", "rmse_state", "site_abs_error", "clip_count"],
    );
    let mut summary_table = ResultTable::labeled(
        "ex2_summary",
        "ensemble",
        &["mean_abs_r_error", "mean_q1", "mean_abs_q2", "site_rmse", "rmse_state"],
    );
    for run in &runs {
        let label = run.ensemble.to_string();
        for (m, c) in run.trace.iter().enumerate() {
            trace_table.push_labeled(
                &label,
                vec![m as f64, c.q1, c.q2, c.r, c.rmse, c.site_error.abs(), c.clip_count as f64],
            )?;
        }
        summary_table.push_labeled(
            &label,
            vec![run.mean_abs_r_error, run.mean_q1, run.mean_abs_q2, run.site_rmse, run.rmse],
        )?;
    }
    Ok(AdaptiveEtkfRun {
        runs,
        trace_table,
        summary_table,
    })
}
