//! Moment dynamics of the scalar quadratic error model `ė = a e + b e²`, a
//! Monte-Carlo solution of its Liouville equation, and the decomposition of a
//! forecast covariance into model and model-error parts.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::models::Rk4;
use crate::rng::{self, Rng};
use crate::table::ResultTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentState {
    pub mean: f64,
    pub var: f64,
    /// Third centred moment.
    pub skew: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// Third moment set to zero.
    #[default]
    GaussianS0,
    /// Third moment held at its initial value.
    CarryS,
}

/// `(aē + bē² + bQ, 2(a + 2bē)Q + 2bS, 0)`.
pub fn moment_rhs(m: &MomentState, a: f64, b: f64, closure: Closure) -> MomentState {
    let s = match closure {
        Closure::GaussianS0 => 0.0,
        Closure::CarryS => m.skew,
    };
    MomentState {
        mean: a * m.mean + b * m.mean * m.mean + b * m.var,
        var: 2.0 * (a + 2.0 * b * m.mean) * m.var + 2.0 * b * s,
        skew: 0.0,
    }
}

/// RK4 integration of [`moment_rhs`]; returns the state at `0, h, ..., t_end`.
pub fn integrate_moments(
    m0: MomentState,
    a: f64,
    b: f64,
    t_end: f64,
    h: f64,
    closure: Closure,
) -> Result<Vec<MomentState>> {
    if !(h > 0.0) || !(t_end > 0.0) {
        return Err(Error::Config(format!("need h > 0 and t_end > 0 (got {h}, {t_end})")));
    }
    let steps = (t_end / h).round() as usize;
    let mut rk = Rk4::new(3);
    let mut x = [m0.mean, m0.var, m0.skew];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(m0);
    let mut f = |_t: f64, s: &[f64], o: &mut [f64]| {
        let d = moment_rhs(
            &MomentState {
                mean: s[0],
                var: s[1],
                skew: s[2],
            },
            a,
            b,
            closure,
        );
        o[0] = d.mean;
        o[1] = d.var;
        o[2] = d.skew;
    };
    for k in 0..steps {
        rk.step(&mut f, k as f64 * h, h, &mut x)?;
        out.push(MomentState {
            mean: x[0],
            var: x[1],
            skew: x[2],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMoments {
    pub t: Vec<f64>,
    pub moments: Vec<MomentState>,
    /// Fraction of samples that left the finite range before `t_end`.
    pub escaped_frac: f64,
}

impl OracleMoments {
    pub fn to_table(&self) -> ResultTable {
        let mut t = ResultTable::new("ex1_oracle", &["t", "mean", "var", "skew", "escaped_frac"]);
        for (ti, m) in self.t.iter().zip(&self.moments) {
            t.push(vec![*ti, m.mean, m.var, m.skew, self.escaped_frac]).unwrap();
        }
        t
    }
}

const ESCAPE: f64 = 1e8;
const CHUNK: usize = 4096;

/// Pushes `n_samples` draws of `p0` through `ė = a e + b e²` with RK4 and
/// returns empirical centred moments at every step. Samples whose magnitude
/// exceeds 10⁸ are dropped from all output times and counted as escaped.
pub fn liouville_mc_oracle<P>(
    p0: P,
    a: f64,
    b: f64,
    t_end: f64,
    h: f64,
    n_samples: usize,
    seed: u64,
) -> Result<OracleMoments>
where
    P: Fn(&mut Rng) -> f64 + Sync,
{
    if n_samples < 10_000 {
        return Err(Error::Config(format!(
            "Liouville oracle needs at least 10^4 samples, got {n_samples}"
        )));
    }
    if !(h > 0.0) || !(t_end > 0.0) {
        return Err(Error::Config(format!("need h > 0 and t_end > 0 (got {h}, {t_end})")));
    }
    let steps = (t_end / h).round() as usize;
    let chunks = n_samples.div_ceil(CHUNK);
    // Each chunk returns its surviving paths as [time][sample].
    let paths: Vec<(Vec<Vec<f64>>, usize)> = exec::map_indexed(chunks, |c| {
        let mut g = rng::stream(seed, "liouville", c as u64);
        let n = CHUNK.min(n_samples - c * CHUNK);
        let mut rk = Rk4::new(1);
        let mut f = |_t: f64, s: &[f64], o: &mut [f64]| o[0] = a * s[0] + b * s[0] * s[0];
        let mut cols = vec![Vec::with_capacity(n); steps + 1];
        let mut escaped = 0;
        let mut path = vec![0.0; steps + 1];
        'sample: for _ in 0..n {
            let mut x = [p0(&mut g)];
            path[0] = x[0];
            for k in 0..steps {
                if rk.step(&mut f, k as f64 * h, h, &mut x).is_err() || x[0].abs() > ESCAPE {
                    escaped += 1;
                    continue 'sample;
                }
                path[k + 1] = x[0];
            }
            for (col, v) in cols.iter_mut().zip(&path) {
                col.push(*v);
            }
        }
        (cols, escaped)
    });
    let escaped: usize = paths.iter().map(|p| p.1).sum();
    let kept = n_samples - escaped;
    if kept < 2 {
        return Err(Error::Divergence("all Liouville samples escaped".into()));
    }
    let mut moments = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mut s = 0.0;
        for (cols, _) in &paths {
            s += cols[k].iter().sum::<f64>();
        }
        let mean = s / kept as f64;
        let (mut s2, mut s3) = (0.0, 0.0);
        for (cols, _) in &paths {
            for v in &cols[k] {
                let d = v - mean;
                s2 += d * d;
                s3 += d * d * d;
            }
        }
        moments.push(MomentState {
            mean,
            var: s2 / (kept as f64 - 1.0),
            skew: s3 / kept as f64,
        });
    }
    Ok(OracleMoments {
        t: (0..=steps).map(|k| k as f64 * h).collect(),
        moments,
        escaped_frac: escaped as f64 / n_samples as f64,
    })
}

/// Empirical statistics of paired truth/model samples with `e = x - x̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub p: DMatrix<f64>,
    pub p_model: DMatrix<f64>,
    pub q_model_err: DMatrix<f64>,
    pub q_err_model: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub mean_err: DVector<f64>,
    /// `max |P - (P̃ + Q_x̃e + Q_ex̃ + Q)|`.
    pub identity_residual: f64,
}

fn cross_cov(a: &[DVector<f64>], b: &[DVector<f64>], ma: &DVector<f64>, mb: &DVector<f64>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(ma.len(), mb.len());
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb).transpose();
    }
    c / (a.len() as f64 - 1.0)
}

fn sample_mean(a: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(a[0].len());
    for x in a {
        m += x;
    }
    m / a.len() as f64
}

pub fn decompose_error(truth: &[DVector<f64>], model: &[DVector<f64>]) -> Result<ErrorDecomposition> {
    if truth.len() != model.len() {
        return Err(Error::Domain(format!(
            "paired samples differ in length: {} vs {}",
            truth.len(),
            model.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData("covariance needs at least 2 samples".into()));
    }
    let err: Vec<DVector<f64>> = truth.iter().zip(model).map(|(x, y)| x - y).collect();
    let (mx, mm, me) = (sample_mean(truth), sample_mean(model), sample_mean(&err));
    let p = cross_cov(truth, truth, &mx, &mx);
    let p_model = cross_cov(model, model, &mm, &mm);
    let q_model_err = cross_cov(model, &err, &mm, &me);
    let q_err_model = q_model_err.transpose();
    let q = cross_cov(&err, &err, &me, &me);
    let identity_residual = (&p - (&p_model + &q_model_err + &q_err_model + &q)).amax();
    Ok(ErrorDecomposition {
        p,
        p_model,
        q_model_err,
        q_err_model,
        q,
        mean_err: me,
        identity_residual,
    })
}

/// Closure moments against the Liouville oracle for `ė = a e + b e²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub a: f64,
    pub b: f64,
    pub mean0: f64,
    /// Initial variance.
    pub var0: f64,
    pub t_end: f64,
    pub h: f64,
    pub samples: usize,
    pub closure: Closure,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            a: -1.0,
            b: 0.1,
            mean0: 0.5,
            var0: 0.01,
            t_end: 0.5,
            h: 0.005,
            samples: 100_000,
            closure: Closure::GaussianS0,
        }
    }
}

impl MomentsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.var0 >= 0.0) || !self.a.is_finite() || !self.b.is_finite() || !self.mean0.is_finite() {
            return Err(Error::Config("moments need finite a, b, mean0 and var0 >= 0".into()));
        }
        if !(self.h > 0.0 && self.t_end >= self.h) {
            return Err(Error::Config("moments need h > 0 and t_end >= h".into()));
        }
        if self.samples < 10_000 {
            return Err(Error::Config("moments need at least 10^4 oracle samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MomentsRun {
    pub t: Vec<f64>,
    pub closure: Vec<MomentState>,
    pub oracle: OracleMoments,
    /// `max_t |ē_closure - ē_oracle| / |ē_oracle|`.
    pub max_rel_mean_error: f64,
    /// Closure moments in the oracle's column layout (escape fraction 0).
    pub closure_table: ResultTable,
    pub oracle_table: ResultTable,
    pub comparison_table: ResultTable,
}

pub fn run_moments_experiment(cfg: &MomentsConfig, seed: u64) -> Result<MomentsRun> {
    cfg.validate()?;
    let m0 = MomentState {
        mean: cfg.mean0,
        var: cfg.var0,
        skew: 0.0,
    };
    let closure = integrate_moments(m0, cfg.a, cfg.b, cfg.t_end, cfg.h, cfg.closure)?;
    let (mu, sd) = (cfg.mean0, cfg.var0.sqrt());
    let oracle = liouville_mc_oracle(
        |g: &mut Rng| mu + sd * g.sample::<f64, _>(rand_distr::StandardNormal),
        cfg.a,
        cfg.b,
        cfg.t_end,
        cfg.h,
        cfg.samples,
        seed,
    )?;
    let mut closure_table = ResultTable::new("ex1_closure", &["t", "mean", "var", "skew", "escaped_frac"]);
    let mut comparison_table = ResultTable::new(
        "ex1_comparison",
        &["t", "closure_mean", "oracle_mean", "rel_mean_error", "closure_var", "oracle_var"],
    );
    let mut worst: f64 = 0.0;
    for ((t, c), o) in oracle.t.iter().zip(&closure).zip(&oracle.moments) {
        let rel = (c.mean - o.mean).abs() / o.mean.abs();
        worst = worst.max(rel);
        closure_table.push(vec![*t, c.mean, c.var, c.skew, 0.0])?;
        comparison_table.push(vec![*t, c.mean, o.mean, rel, c.var, o.var])?;
    }
    Ok(MomentsRun {
        t: oracle.t.clone(),
        closure,
        oracle_table: oracle.to_table(),
        oracle,
        max_rel_mean_error: worst,
        closure_table,
        comparison_table,
    })
}
