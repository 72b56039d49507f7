//! Test dynamical systems, fixed-step integrators, truth trajectories and
//! synthetic observations.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{lyapunov_2x2, psd_sqrt, sample_with_factor};
use crate::table::fmt_f64;
use crate::{Error, Result};

fn ensure_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite {what}")))
    }
}

// ---------------------------------------------------------------- Lorenz-63

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for L63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

pub fn l63_drift(state: &[f64], p: &L63Params) -> Result<[f64; 3]> {
    if state.len() != 3 {
        return Err(Error::Domain(format!("Lorenz-63 state has length {}", state.len())));
    }
    ensure_finite(state, "Lorenz-63 state")?;
    let mut out = [0.0; 3];
    l63_drift_into(state, p, &mut out);
    Ok(out)
}

#[inline]
pub fn l63_drift_into(s: &[f64], p: &L63Params, out: &mut [f64]) {
    out[0] = p.sigma * (s[1] - s[0]);
    out[1] = p.rho * s[0] - s[1] - s[0] * s[2];
    out[2] = s[0] * s[1] - p.beta * s[2];
}

// ---------------------------------------------------------------- Lorenz-96

/// `dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - θ x_j + F` on a periodic ring.
pub fn l96_drift(state: &[f64], theta: f64, forcing: f64) -> Result<Vec<f64>> {
    if state.len() < 4 {
        return Err(Error::Config(format!(
            "Lorenz-96 needs at least 4 sites, got {}",
            state.len()
        )));
    }
    ensure_finite(state, "Lorenz-96 state")?;
    let mut out = vec![0.0; state.len()];
    l96_drift_into(state, theta, forcing, &mut out);
    Ok(out)
}

#[inline]
pub fn l96_drift_into(x: &[f64], theta: f64, forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let p1 = x[(j + 1) % n];
        let m1 = x[(j + n - 1) % n];
        let m2 = x[(j + n - 2) % n];
        out[j] = (p1 - m2) * m1 - theta * x[j] + forcing;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLayerL96Params {
    /// Number of slow sites.
    pub n: usize,
    /// Fast sites per slow site.
    pub j: usize,
    pub eps: f64,
    pub forcing: f64,
    pub a: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Default for TwoLayerL96Params {
    fn default() -> Self {
        Self {
            n: 8,
            j: 32,
            eps: 0.25,
            forcing: 20.0,
            a: 10.0,
            hx: -0.4,
            hy: 0.1,
        }
    }
}

impl TwoLayerL96Params {
    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("two-layer eps must be > 0, got {}", self.eps)));
        }
        if self.n < 4 || self.j < 3 {
            return Err(Error::Config(format!(
                "two-layer Lorenz-96 needs n >= 4 and j >= 3 (got n={}, j={})",
                self.n, self.j
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n * (self.j + 1)
    }
}

/// Drift of the two-layer model; the slow block comes first.
pub fn l96_two_layer_drift(state: &[f64], p: &TwoLayerL96Params) -> Result<Vec<f64>> {
    p.validate()?;
    if state.len() != p.dim() {
        return Err(Error::Domain(format!(
            "two-layer state has length {}, expected {}",
            state.len(),
            p.dim()
        )));
    }
    ensure_finite(state, "two-layer state")?;
    let mut out = vec![0.0; state.len()];
    l96_two_layer_drift_into(state, p, &mut out);
    Ok(out)
}

pub fn l96_two_layer_drift_into(state: &[f64], p: &TwoLayerL96Params, out: &mut [f64]) {
    let (n, jj) = (p.n, p.j);
    let nf = n * jj;
    let (x, y) = state.split_at(n);
    let (ox, oy) = out.split_at_mut(n);
    for i in 0..n {
        let coupling: f64 = y[i * jj..(i + 1) * jj].iter().sum();
        ox[i] = x[(i + n - 1) % n] * (x[(i + 1) % n] - x[(i + n - 2) % n]) - x[i]
            + p.forcing
            + p.hx * coupling;
    }
    let inv_eps = 1.0 / p.eps;
    for j in 0..nf {
        let yp1 = y[(j + 1) % nf];
        let yp2 = y[(j + 2) % nf];
        let ym1 = y[(j + nf - 1) % nf];
        oy[j] = inv_eps * (p.a * yp1 * (ym1 - yp2) - y[j] + p.hy * x[j / jj]);
    }
}

// --------------------------------------------------- linear two-scale system

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTwoScaleParams {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub eps: f64,
}

impl Default for LinearTwoScaleParams {
    fn default() -> Self {
        Self {
            a11: -1.0,
            a12: 1.0,
            a21: -1.0,
            a22: -1.0,
            sigma_x: 2f64.sqrt(),
            sigma_y: 2f64.sqrt(),
            eps: 1.0,
        }
    }
}

impl LinearTwoScaleParams {
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Reduced slow drift `a11 - a12 a21 / a22`.
    pub fn a_tilde(&self) -> f64 {
        self.a11 - self.a12 * self.a21 / self.a22
    }

    /// `a12 a21 / a22²`.
    pub fn a_hat(&self) -> f64 {
        self.a12 * self.a21 / (self.a22 * self.a22)
    }

    pub fn drift_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.a11,
            self.a12,
            self.a21 / self.eps,
            self.a22 / self.eps,
        )
    }

    /// `Σ Σᵀ = diag(σx², σy²/ε)`.
    pub fn diffusion_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.sigma_x * self.sigma_x,
            0.0,
            0.0,
            self.sigma_y * self.sigma_y / self.eps,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.sigma_x < 0.0 || self.sigma_y < 0.0 {
            return Err(Error::Config("noise amplitudes must be >= 0".into()));
        }
        if self.a22 == 0.0 {
            return Err(Error::Config("a22 must be nonzero".into()));
        }
        let a = self.drift_matrix();
        let tr = a.trace();
        let det = a.determinant();
        // 2x2 eigenvalues have negative real parts iff trace < 0 and det > 0.
        if !(tr < 0.0 && det > 0.0) {
            return Err(Error::Config(format!(
                "drift matrix is not stable (trace {tr}, det {det})"
            )));
        }
        if !(self.a_tilde() < 0.0) {
            return Err(Error::Config(format!(
                "reduced drift a11 - a12 a21/a22 = {} must be negative",
                self.a_tilde()
            )));
        }
        Ok(())
    }

    /// Stationary covariance of (x, y).
    pub fn stationary_covariance(&self) -> Result<Matrix2<f64>> {
        self.validate()?;
        lyapunov_2x2(&self.drift_matrix(), &self.diffusion_matrix())
    }
}

/// Drift and diagonal diffusion amplitudes of the linear two-scale SDE.
pub fn linear_two_scale_drift_diffusion(
    state: &[f64; 2],
    p: &LinearTwoScaleParams,
) -> Result<([f64; 2], [f64; 2])> {
    p.validate()?;
    ensure_finite(state, "two-scale state")?;
    let (x, y) = (state[0], state[1]);
    Ok((
        [p.a11 * x + p.a12 * y, (p.a21 * x + p.a22 * y) / p.eps],
        [p.sigma_x, p.sigma_y / p.eps.sqrt()],
    ))
}

// ---------------------------------------------------------------- SPEKF

/// Deterministic forcing of the observed SPEKF mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forcing {
    #[default]
    Zero,
    Constant { re: f64, im: f64 },
    /// `amplitude · exp(i frequency t)`
    Harmonic { amplitude: f64, frequency: f64 },
}

impl Forcing {
    pub fn at(&self, t: f64) -> Complex64 {
        match *self {
            Forcing::Zero => Complex64::new(0.0, 0.0),
            Forcing::Constant { re, im } => Complex64::new(re, im),
            Forcing::Harmonic { amplitude, frequency } => {
                Complex64::from_polar(amplitude, frequency * t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpekfParams {
    pub eps: f64,
    pub gamma_hat: f64,
    pub omega: f64,
    pub gamma_b: f64,
    pub omega_b: f64,
    pub d_gamma: f64,
    pub sigma_x: f64,
    pub sigma_b: f64,
    pub sigma_gamma: f64,
    #[serde(default)]
    pub forcing: Forcing,
}

impl Default for SpekfParams {
    fn default() -> Self {
        Self {
            eps: 1.0,
            gamma_hat: 1.2,
            omega: 0.0,
            gamma_b: 0.5,
            omega_b: 0.0,
            d_gamma: 20.0,
            sigma_x: 0.5,
            sigma_b: 0.5,
            sigma_gamma: 20.0,
            forcing: Forcing::Zero,
        }
    }
}

impl SpekfParams {
    /// `λ̂ = γ̂ - iω`
    pub fn lambda_hat(&self) -> Complex64 {
        Complex64::new(self.gamma_hat, -self.omega)
    }

    /// `λ_b = γ_b - iω_b`
    pub fn lambda_b(&self) -> Complex64 {
        Complex64::new(self.gamma_b, -self.omega_b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.d_gamma > 0.0) {
            return Err(Error::Config(format!(
                "SPEKF needs eps > 0 and d_gamma > 0 (got eps={}, d_gamma={})",
                self.eps, self.d_gamma
            )));
        }
        if !(self.gamma_hat > 0.0) || !(self.gamma_b > 0.0) {
            return Err(Error::Config("SPEKF damping gamma_hat, gamma_b must be > 0".into()));
        }
        if self.sigma_x < 0.0 || self.sigma_b < 0.0 || self.sigma_gamma < 0.0 {
            return Err(Error::Config("SPEKF noise amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpekfState {
    pub x: Complex64,
    pub b: Complex64,
    pub gamma: f64,
}

impl SpekfState {
    /// Interleaved real layout `[re x, im x, re b, im b, γ]`.
    pub fn to_real(&self) -> [f64; 5] {
        [self.x.re, self.x.im, self.b.re, self.b.im, self.gamma]
    }

    pub fn from_real(v: &[f64]) -> Self {
        Self {
            x: Complex64::new(v[0], v[1]),
            b: Complex64::new(v[2], v[3]),
            gamma: v[4],
        }
    }
}

/// Drift of `(x, b̃, γ̃)` and the (complex-increment) noise amplitudes
/// `(σx, σb/√ε, σγ/√ε)`.
pub fn spekf_drift_diffusion(
    s: &SpekfState,
    p: &SpekfParams,
    t: f64,
) -> Result<(SpekfState, [f64; 3])> {
    p.validate()?;
    ensure_finite(&s.to_real(), "SPEKF state")?;
    let drift = SpekfState {
        x: -(s.gamma + p.lambda_hat()) * s.x + s.b + p.forcing.at(t),
        b: -(p.lambda_b() / p.eps) * s.b,
        gamma: -(p.d_gamma / p.eps) * s.gamma,
    };
    let rs = p.eps.sqrt();
    Ok((drift, [p.sigma_x, p.sigma_b / rs, p.sigma_gamma / rs]))
}

// ---------------------------------------------------------------- systems

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemId {
    L63,
    L96,
    L96TwoLayer,
    LinearTwoScale,
    Spekf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    L63(L63Params),
    L96 { n: usize, theta: f64, forcing: f64 },
    L96TwoLayer(TwoLayerL96Params),
    LinearTwoScale(LinearTwoScaleParams),
    Spekf(SpekfParams),
}

impl SystemSpec {
    pub fn id(&self) -> SystemId {
        match self {
            SystemSpec::L63(_) => SystemId::L63,
            SystemSpec::L96 { .. } => SystemId::L96,
            SystemSpec::L96TwoLayer(_) => SystemId::L96TwoLayer,
            SystemSpec::LinearTwoScale(_) => SystemId::LinearTwoScale,
            SystemSpec::Spekf(_) => SystemId::Spekf,
        }
    }

    pub fn dim_slow(&self) -> usize {
        match self {
            SystemSpec::L63(_) => 3,
            SystemSpec::L96 { n, .. } => *n,
            SystemSpec::L96TwoLayer(p) => p.n,
            SystemSpec::LinearTwoScale(_) => 1,
            // complex x
            SystemSpec::Spekf(_) => 2,
        }
    }

    pub fn dim_fast(&self) -> usize {
        match self {
            SystemSpec::L96TwoLayer(p) => p.n * p.j,
            SystemSpec::LinearTwoScale(_) => 1,
            SystemSpec::Spekf(_) => 3,
            _ => 0,
        }
    }

    /// Number of real components of a state vector.
    pub fn dim(&self) -> usize {
        self.dim_slow() + self.dim_fast()
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, SystemSpec::LinearTwoScale(_) | SystemSpec::Spekf(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::L63(_) => Ok(()),
            SystemSpec::L96 { n, .. } if *n < 4 => {
                Err(Error::Config(format!("Lorenz-96 needs at least 4 sites, got {n}")))
            }
            SystemSpec::L96 { .. } => Ok(()),
            SystemSpec::L96TwoLayer(p) => p.validate(),
            SystemSpec::LinearTwoScale(p) => p.validate(),
            SystemSpec::Spekf(p) => p.validate(),
        }
    }

    /// Column names for persisted states (complex components split in two).
    pub fn column_names(&self) -> Vec<String> {
        match self {
            SystemSpec::Spekf(_) => ["re_x", "im_x", "re_b", "im_b", "gamma"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            _ => (0..self.dim()).map(|i| format!("x_{i}")).collect(),
        }
    }

    /// Drift in the real layout, without validation (hot path).
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            SystemSpec::L63(p) => l63_drift_into(x, p, out),
            SystemSpec::L96 { theta, forcing, .. } => l96_drift_into(x, *theta, *forcing, out),
            SystemSpec::L96TwoLayer(p) => l96_two_layer_drift_into(x, p, out),
            SystemSpec::LinearTwoScale(p) => {
                out[0] = p.a11 * x[0] + p.a12 * x[1];
                out[1] = (p.a21 * x[0] + p.a22 * x[1]) / p.eps;
            }
            SystemSpec::Spekf(p) => {
                let s = SpekfState::from_real(x);
                let dx = -(s.gamma + p.lambda_hat()) * s.x + s.b + p.forcing.at(t);
                let db = -(p.lambda_b() / p.eps) * s.b;
                out[0] = dx.re;
                out[1] = dx.im;
                out[2] = db.re;
                out[3] = db.im;
                out[4] = -(p.d_gamma / p.eps) * s.gamma;
            }
        }
    }

    /// Diagonal diffusion amplitudes per real component. A complex component
    /// with amplitude σ gets σ/√2 on each of its real and imaginary parts so
    /// that `E|dW|² = dt`.
    pub fn diffusion_into(&self, out: &mut [f64]) {
        match self {
            SystemSpec::LinearTwoScale(p) => {
                out[0] = p.sigma_x;
                out[1] = p.sigma_y / p.eps.sqrt();
            }
            SystemSpec::Spekf(p) => {
                let h = std::f64::consts::FRAC_1_SQRT_2;
                let rs = p.eps.sqrt();
                out[0] = p.sigma_x * h;
                out[1] = p.sigma_x * h;
                out[2] = p.sigma_b / rs * h;
                out[3] = p.sigma_b / rs * h;
                out[4] = p.sigma_gamma / rs;
            }
            _ => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

// ---------------------------------------------------------------- integrators

/// Reusable stage buffers for the classical fourth-order Runge-Kutta method.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `x` in place by one step of size `h`.
    pub fn step<F>(&mut self, f: &mut F, t: f64, h: f64, x: &mut [f64]) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = x.len();
        if self.k1.len() != n {
            *self = Rk4::new(n);
        }
        f(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        let mut finite = true;
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            finite &= x[i].is_finite();
        }
        if finite {
            Ok(())
        } else {
            Err(Error::Blowup { time: t + h })
        }
    }
}

pub fn rk4_step<F>(mut f: F, state: &[f64], t: f64, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be > 0, got {h}")));
    }
    let mut x = state.to_vec();
    Rk4::new(x.len()).step(&mut f, t, h, &mut x)?;
    Ok(x)
}

/// Euler–Maruyama step `x + a(t,x) h + b(t,x) √h ξ` with diagonal amplitudes
/// `b` and independent standard normals `ξ`.
pub fn em_step<D, S, R>(
    mut drift: D,
    mut diffusion: S,
    state: &[f64],
    t: f64,
    h: f64,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    D: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(f64, &[f64], &mut [f64]),
    R: Rng + ?Sized,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be > 0, got {h}")));
    }
    let n = state.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    drift(t, state, &mut a);
    diffusion(t, state, &mut b);
    let sh = h.sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let v = state[i] + a[i] * h + b[i] * sh * xi;
        if !v.is_finite() {
            return Err(Error::Blowup { time: t + h });
        }
        out.push(v);
    }
    Ok(out)
}

// ---------------------------------------------------------------- trajectories

/// Time-ordered states with constant spacing `dt`, starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Component `c` as a series.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[c]).collect()
    }

    /// Writes `t, <columns...>` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W, columns: &[String]) -> Result<()> {
        write!(w, "t")?;
        for c in columns {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (i, s) in self.states.iter().enumerate() {
            write!(w, "{}", fmt_f64(self.time(i)))?;
            for v in s {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    /// Integrator step.
    pub h: f64,
    /// Store every `subsample`-th step.
    pub subsample: usize,
    /// Model time discarded before recording.
    pub spinup: f64,
}

/// Integrates `spec` from `x0` (RK4 for deterministic systems, Euler–Maruyama
/// for SDEs). After the spin-up the current state is recorded at t = 0 and
/// then every `subsample` steps until `t_end`.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    spec: &SystemSpec,
    x0: &[f64],
    t_end: f64,
    opts: SimulationOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    spec.validate()?;
    if !(t_end > 0.0) || opts.subsample == 0 || !(opts.h > 0.0) {
        return Err(Error::Config(format!(
            "need t_end > 0, h > 0 and subsample >= 1 (got {t_end}, {}, {})",
            opts.h, opts.subsample
        )));
    }
    if x0.len() != spec.dim() {
        return Err(Error::Domain(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            spec.dim()
        )));
    }
    ensure_finite(x0, "initial state")?;
    let mut x = x0.to_vec();
    let mut t = -opts.spinup;
    let spin_steps = (opts.spinup / opts.h).round() as usize;
    let steps = (t_end / opts.h).round() as usize;
    let mut stepper = Stepper::new(spec);
    for _ in 0..spin_steps {
        stepper.step(spec, t, opts.h, &mut x, rng)?;
        t += opts.h;
    }
    let mut states = Vec::with_capacity(steps / opts.subsample + 1);
    states.push(x.clone());
    for k in 1..=steps {
        let tk = (k - 1) as f64 * opts.h;
        stepper.step(spec, tk, opts.h, &mut x, rng)?;
        if k % opts.subsample == 0 {
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        t0: 0.0,
        dt: opts.h * opts.subsample as f64,
        states,
    })
}

struct Stepper {
    rk: Rk4,
    drift: Vec<f64>,
    amp: Vec<f64>,
}

impl Stepper {
    fn new(spec: &SystemSpec) -> Self {
        let n = spec.dim();
        Self {
            rk: Rk4::new(n),
            drift: vec![0.0; n],
            amp: vec![0.0; n],
        }
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        spec: &SystemSpec,
        t: f64,
        h: f64,
        x: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        if spec.is_stochastic() {
            spec.drift_into(t, x, &mut self.drift);
            spec.diffusion_into(&mut self.amp);
            let sh = h.sqrt();
            for i in 0..x.len() {
                let xi: f64 = rng.sample(StandardNormal);
                x[i] += self.drift[i] * h + self.amp[i] * sh * xi;
                if !x[i].is_finite() {
                    return Err(Error::Blowup { time: t + h });
                }
            }
            Ok(())
        } else {
            self.rk.step(&mut |tt, xx, out| spec.drift_into(tt, xx, out), t, h, x)
        }
    }
}

// ---------------------------------------------------------------- observations

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub v: DVector<f64>,
}

/// Selection matrix observing the listed components of a `dim`-vector.
pub fn selection_matrix(dim: usize, indices: &[usize]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(indices.len(), dim);
    for (r, &c) in indices.iter().enumerate() {
        h[(r, c)] = 1.0;
    }
    h
}

/// `v_m = h(x(t_m)) + η_m`, `η_m ~ N(0, R)`, at every `interval` model time
/// units after the first state (the first observation is at `t0 + interval`).
pub fn generate_observations<H, R>(
    traj: &Trajectory,
    h: H,
    r: &DMatrix<f64>,
    interval: f64,
    rng: &mut R,
) -> Result<Vec<Observation>>
where
    H: Fn(&[f64]) -> DVector<f64>,
    R: Rng + ?Sized,
{
    let ratio = interval / traj.dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "observation interval {interval} is not a multiple of the trajectory step {}",
            traj.dt
        )));
    }
    let stride = stride as usize;
    if r.nrows() != r.ncols() {
        return Err(Error::Config("R must be square".into()));
    }
    let factor = psd_sqrt(r);
    let mut out = Vec::new();
    let mut i = stride;
    while i < traj.len() {
        let mut v = h(&traj.states[i]);
        if v.len() != r.nrows() {
            return Err(Error::Config(format!(
                "observation has dimension {}, R is {}x{}",
                v.len(),
                r.nrows(),
                r.ncols()
            )));
        }
        v += sample_with_factor(rng, &factor);
        out.push(Observation { t: traj.time(i), v });
        i += stride;
    }
    Ok(out)
}

/// Slow-variable variance of the linear two-scale system (Lyapunov solution).
pub fn linear_slow_variance(p: &LinearTwoScaleParams) -> Result<f64> {
    Ok(p.stationary_covariance()?[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    #[test]
    fn l63_fixed_points_and_hand_values() {
        let p = L63Params::default();
        assert_eq!(l63_drift(&[0.0, 0.0, 0.0], &p).unwrap(), [0.0; 3]);
        let s = 72f64.sqrt();
        let d = l63_drift(&[s, s, 27.0], &p).unwrap();
        for v in d {
            assert!(v.abs() < 1e-12);
        }
        let d = l63_drift(&[1.0, 1.0, 1.0], &p).unwrap();
        assert_relative_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 26.0);
        assert_relative_eq!(d[2], 1.0 - 8.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(l63_drift(&[f64::NAN, 0.0, 0.0], &p), Err(Error::Domain(_))));
    }

    #[test]
    fn l96_examples() {
        assert_eq!(l96_drift(&[0.0; 8], 1.0, 8.0).unwrap(), vec![8.0; 8]);
        assert_eq!(l96_drift(&[1.0; 8], 1.0, 8.0).unwrap(), vec![7.0; 8]);
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let a = l96_drift(&x, 1.2, 8.0).unwrap();
        let b = l96_drift(&x, 1.0, 8.0).unwrap();
        for j in 0..10 {
            assert_relative_eq!(b[j] - a[j], 0.2 * x[j], epsilon = 1e-12);
        }
        assert!(matches!(l96_drift(&[1.0; 3], 1.0, 8.0), Err(Error::Config(_))));
    }

    #[test]
    fn two_layer_examples() {
        let p = TwoLayerL96Params::default();
        let zero = vec![0.0; p.dim()];
        let d = l96_two_layer_drift(&zero, &p).unwrap();
        assert!(d[..p.n].iter().all(|&v| v == p.forcing));
        assert!(d[p.n..].iter().all(|&v| v == 0.0));

        let mut s = vec![0.0; p.dim()];
        for i in 0..p.n {
            s[i] = (i as f64).cos() * 4.0;
        }
        let d = l96_two_layer_drift(&s, &p).unwrap();
        let reference = l96_drift(&s[..p.n], 1.0, p.forcing).unwrap();
        for i in 0..p.n {
            assert_relative_eq!(d[i], reference[i], epsilon = 1e-12);
        }

        let mut s = vec![1.0; p.dim()];
        s[..p.n].iter_mut().for_each(|v| *v = 0.0);
        let d = l96_two_layer_drift(&s, &p).unwrap();
        assert!(d[p.n..].iter().all(|&v| (v + 4.0).abs() < 1e-12));

        let bad = TwoLayerL96Params { eps: 0.0, ..p };
        assert!(matches!(l96_two_layer_drift(&zero, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn l96_shift_equivariance() {
        let x: Vec<f64> = (0..12).map(|i| ((i * i) as f64 * 0.37).sin() * 5.0).collect();
        let mut shifted = x.clone();
        shifted.rotate_right(1);
        let mut d = l96_drift(&x, 1.0, 8.0).unwrap();
        d.rotate_right(1);
        assert_eq!(d, l96_drift(&shifted, 1.0, 8.0).unwrap());
    }

    #[test]
    fn linear_two_scale_examples() {
        let p = LinearTwoScaleParams::default().with_eps(0.5);
        let (d, _) = linear_two_scale_drift_diffusion(&[0.0, 0.0], &p).unwrap();
        assert_eq!(d, [0.0, 0.0]);
        let (d, s) = linear_two_scale_drift_diffusion(&[1.0, 1.0], &p).unwrap();
        assert_relative_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], -4.0);
        assert_relative_eq!(s[0], 2f64.sqrt());
        assert_relative_eq!(s[1], 2.0, epsilon = 1e-12);
        let unstable = LinearTwoScaleParams { a11: 1.0, ..p };
        assert!(unstable.validate().is_err());
        assert!(LinearTwoScaleParams::default().with_eps(0.0).validate().is_err());
    }

    #[test]
    fn spekf_examples() {
        let p = SpekfParams::default();
        let zero = SpekfState {
            x: Complex64::new(0.0, 0.0),
            b: Complex64::new(0.0, 0.0),
            gamma: 0.0,
        };
        let (d, _) = spekf_drift_diffusion(&zero, &p, 0.0).unwrap();
        assert_eq!(d.x, Complex64::new(0.0, 0.0));
        let s = SpekfState {
            x: Complex64::new(1.0, 0.0),
            ..zero
        };
        let (d, _) = spekf_drift_diffusion(&s, &p, 0.0).unwrap();
        assert_relative_eq!(d.x.re, -1.2);
        let s = SpekfState { gamma: 0.8, ..s };
        let (d, _) = spekf_drift_diffusion(&s, &p, 0.0).unwrap();
        assert_relative_eq!(d.x.re, -2.0);
        let bad = SpekfParams { d_gamma: 0.0, ..p };
        assert!(spekf_drift_diffusion(&s, &bad, 0.0).is_err());
    }

    #[test]
    fn rk4_examples_and_order() {
        let x = rk4_step(|_, _, o: &mut [f64]| o[0] = 0.0, &[3.0], 0.0, 0.1).unwrap();
        assert_eq!(x, vec![3.0]);
        let x = rk4_step(|_, s: &[f64], o: &mut [f64]| o[0] = -s[0], &[1.0], 0.0, 0.1).unwrap();
        assert!((x[0] - 0.904_837_5).abs() < 1e-7);
        let err = |h: f64| {
            let x = rk4_step(|_, s: &[f64], o: &mut [f64]| o[0] = -s[0], &[1.0], 0.0, h).unwrap();
            (x[0] - (-h).exp()).abs()
        };
        // one-step local error is O(h^5): halving h gives ~32x
        let ratio = err(0.2) / err(0.1);
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
        // global error over a fixed horizon is O(h^4)
        let global = |n: usize| {
            let h = 1.0 / n as f64;
            let mut x = vec![1.0];
            let mut rk = Rk4::new(1);
            for k in 0..n {
                rk.step(&mut |_, s: &[f64], o: &mut [f64]| o[0] = -s[0], k as f64 * h, h, &mut x)
                    .unwrap();
            }
            (x[0] - (-1f64).exp()).abs()
        };
        let ratio = global(10) / global(20);
        assert!((ratio - 16.0).abs() < 1.5, "global ratio {ratio}");

        let p = L63Params::default();
        let s = 72f64.sqrt();
        let x = rk4_step(|_, st: &[f64], o: &mut [f64]| l63_drift_into(st, &p, o), &[s, s, 27.0], 0.0, 0.01)
            .unwrap();
        assert!((x[0] - s).abs() < 1e-12 && (x[2] - 27.0).abs() < 1e-12);

        let blow = rk4_step(|_, _, o: &mut [f64]| o[0] = f64::INFINITY, &[1.0], 2.0, 0.5);
        assert!(matches!(blow, Err(Error::Blowup { time }) if time == 2.5));
    }

    #[test]
    fn em_examples() {
        let mut r = rng::stream(7, "em", 0);
        let x = em_step(
            |_, s: &[f64], o: &mut [f64]| o[0] = -s[0],
            |_, _, o: &mut [f64]| o[0] = 0.0,
            &[1.0],
            0.0,
            0.1,
            &mut r,
        )
        .unwrap();
        assert_relative_eq!(x[0], 0.9);

        let (sigma, h) = (1.7, 0.01);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = em_step(
                |_, _, o: &mut [f64]| o[0] = 0.0,
                |_, _, o: &mut [f64]| o[0] = sigma,
                &[0.0],
                0.0,
                h,
                &mut r,
            )
            .unwrap();
            sum += x[0];
            sum2 += x[0] * x[0];
        }
        let var = sum2 / n as f64 - (sum / n as f64).powi(2);
        assert!((var / (sigma * sigma * h) - 1.0).abs() < 0.01, "var {var}");

        let run = |seed| {
            em_step(
                |_, s: &[f64], o: &mut [f64]| o[0] = -s[0],
                |_, _, o: &mut [f64]| o[0] = 1.0,
                &[0.3],
                0.0,
                0.01,
                &mut rng::stream(seed, "em", 3),
            )
            .unwrap()
        };
        assert_eq!(run(5)[0].to_bits(), run(5)[0].to_bits());
    }

    #[test]
    fn em_ou_long_run_variance() {
        // dx = -x dt + √2 dW has unit stationary variance
        let mut r = rng::stream(11, "ou", 0);
        let h = 1e-3;
        let mut x = 0.0f64;
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
        for k in 0..4_000_000 {
            let xi: f64 = r.sample(StandardNormal);
            x += -x * h + 2f64.sqrt() * h.sqrt() * xi;
            if k > 10_000 && k % 10 == 0 {
                s += x;
                s2 += x * x;
                n += 1;
            }
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.02 * 2.5, "var {var}");
    }

    #[test]
    fn trajectory_lengths_and_observations() {
        let spec = SystemSpec::L96 {
            n: 8,
            theta: 1.0,
            forcing: 8.0,
        };
        let mut r = rng::stream(1, "traj", 0);
        let x0: Vec<f64> = (0..8).map(|i| 8.0 + 0.01 * i as f64).collect();
        let opts = SimulationOptions {
            h: 0.01,
            subsample: 1,
            spinup: 0.0,
        };
        let tr = simulate_trajectory(&spec, &x0, 0.01, opts, &mut r).unwrap();
        assert_eq!(tr.len(), 2);

        let opts = SimulationOptions {
            h: 0.005,
            subsample: 10,
            spinup: 1.0,
        };
        let tr = simulate_trajectory(&spec, &x0, 5.0, opts, &mut r).unwrap();
        let h = selection_matrix(8, &[0, 2, 4, 6]);
        let exact = generate_observations(
            &tr,
            |s| &h * DVector::from_column_slice(s),
            &DMatrix::zeros(4, 4),
            0.1,
            &mut r,
        )
        .unwrap();
        assert_eq!(exact.len(), 50);
        assert_eq!(exact[0].v[1], tr.states[2][2]);
        let bad = generate_observations(
            &tr,
            |s| &h * DVector::from_column_slice(s),
            &DMatrix::zeros(4, 4),
            0.075,
            &mut r,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn observation_noise_covariance() {
        let tr = Trajectory {
            t0: 0.0,
            dt: 1.0,
            states: vec![vec![0.0, 0.0]; 100_001],
        };
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let mut g = rng::stream(2, "obs", 0);
        let obs = generate_observations(&tr, |s| DVector::from_column_slice(s), &r, 1.0, &mut g)
            .unwrap();
        let mut c = DMatrix::zeros(2, 2);
        for o in &obs {
            c += &o.v * o.v.transpose();
        }
        c /= obs.len() as f64;
        for (a, b) in c.iter().zip(r.iter()) {
            assert!((a - b).abs() < 0.02 * r[(0, 0)], "{a} vs {b}");
        }
    }

    #[test]
    fn l96_energy_is_stationary() {
        let spec = SystemSpec::L96 {
            n: 40,
            theta: 1.0,
            forcing: 8.0,
        };
        let mut r = rng::stream(3, "l96", 0);
        let x0: Vec<f64> = (0..40).map(|i| 8.0 + if i == 0 { 0.01 } else { 0.0 }).collect();
        let opts = SimulationOptions {
            h: 0.005,
            subsample: 10,
            spinup: 10.0,
        };
        let tr = simulate_trajectory(&spec, &x0, 400.0, opts, &mut r).unwrap();
        let energy: Vec<f64> = tr.states.iter().map(|s| s.iter().map(|v| v * v).sum()).collect();
        let half = energy.len() / 2;
        let second = &energy[half..];
        let m = second.len();
        let mut running = 0.0;
        let mut means = Vec::new();
        for (k, e) in second.iter().enumerate() {
            running += e;
            means.push(running / (k + 1) as f64);
        }
        let quarter = means[m / 2];
        let last = means[m - 1];
        assert!(((quarter - last) / last).abs() < 0.02, "{quarter} vs {last}");
    }

    #[test]
    fn linear_two_scale_sample_variance_matches_lyapunov() {
        let p = LinearTwoScaleParams::default().with_eps(0.5);
        let spec = SystemSpec::LinearTwoScale(p);
        let mut r = rng::stream(4, "lin", 0);
        let opts = SimulationOptions {
            h: 1e-3,
            subsample: 100,
            spinup: 10.0,
        };
        let tr = simulate_trajectory(&spec, &[0.0, 0.0], 5000.0, opts, &mut r).unwrap();
        let x = tr.component(0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let target = linear_slow_variance(&p).unwrap();
        assert!((var / target - 1.0).abs() < 0.03, "{var} vs {target}");
    }
}
