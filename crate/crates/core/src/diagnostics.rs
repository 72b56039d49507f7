//! Error metrics, autocorrelation and density estimates.

use crate::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Domain(format!(
            "series lengths {} and {} must match and be nonzero",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

/// RMSE over time and components of two vector-valued series.
pub fn rmse_vec(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Domain(format!(
            "series lengths {} and {} must match and be nonzero",
            a.len(),
            b.len()
        )));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::Domain("component count mismatch".into()));
        }
        s += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        n += x.len();
    }
    Ok((s / n as f64).sqrt())
}

/// Biased autocorrelation estimate for lags `0..=max_lag`, normalized so that
/// `acf[0] = 1`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if max_lag >= n {
        return Err(Error::InsufficientData(format!(
            "max_lag {max_lag} needs more than {n} samples"
        )));
    }
    let m = mean(series);
    let c: Vec<f64> = series.iter().map(|v| v - m).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    if c0 == 0.0 {
        return Err(Error::InsufficientData("constant series has no autocorrelation".into()));
    }
    Ok((0..=max_lag)
        .map(|l| c[..n - l].iter().zip(&c[l..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

/// First lag (in units of the sampling step, linearly interpolated) at which
/// the autocorrelation drops below `1/e`; `None` if it never does.
pub fn correlation_time(acf: &[f64]) -> Option<f64> {
    let level = (-1f64).exp();
    acf.windows(2).enumerate().find_map(|(l, w)| {
        (w[1] < level).then(|| l as f64 + (w[0] - level) / (w[0] - w[1]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityMethod {
    Histogram { bins: usize },
    /// Gaussian kernel with Silverman bandwidth evaluated on `points` nodes.
    Kernel { points: usize },
}

impl Default for DensityMethod {
    fn default() -> Self {
        DensityMethod::Histogram { bins: 100 }
    }
}

pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let sd = variance(samples).sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// One-dimensional density estimate. Without a `grid`, histograms use bin
/// centres over `[min, max]` padded by 5% and kernels use an evenly spaced grid
/// over the sample range widened by three bandwidths. The returned values
/// integrate to one under the trapezoid rule on the returned grid.
pub fn density1d(
    samples: &[f64],
    method: DensityMethod,
    grid: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "density needs at least 100 samples, got {}",
            samples.len()
        )));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::InsufficientData("samples have zero spread".into()));
    }
    let (grid, mut pdf) = match method {
        DensityMethod::Histogram { bins } => {
            let pad = 0.05 * (hi - lo);
            let (a, b) = match grid {
                Some(g) if g.len() >= 2 => {
                    let w = g[1] - g[0];
                    (g[0] - 0.5 * w, g[g.len() - 1] + 0.5 * w)
                }
                _ => (lo - pad, hi + pad),
            };
            let bins = grid.map_or(bins, |g| g.len()).max(2);
            let w = (b - a) / bins as f64;
            let mut counts = vec![0.0; bins];
            for &s in samples {
                let k = ((s - a) / w).floor();
                if k >= 0.0 && (k as usize) < bins {
                    counts[k as usize] += 1.0;
                }
            }
            let centres: Vec<f64> = (0..bins).map(|k| a + (k as f64 + 0.5) * w).collect();
            (centres, counts)
        }
        DensityMethod::Kernel { points } => {
            let bw = silverman_bandwidth(samples);
            let g: Vec<f64> = match grid {
                Some(g) => g.to_vec(),
                None => {
                    let (a, b) = (lo - 3.0 * bw, hi + 3.0 * bw);
                    let p = points.max(2);
                    (0..p).map(|k| a + (b - a) * k as f64 / (p - 1) as f64).collect()
                }
            };
            let inv = 1.0 / (bw * (2.0 * std::f64::consts::PI).sqrt() * samples.len() as f64);
            let vals = g
                .iter()
                .map(|&x| {
                    samples
                        .iter()
                        .map(|&s| (-0.5 * ((x - s) / bw).powi(2)).exp())
                        .sum::<f64>()
                        * inv
                })
                .collect();
            (g, vals)
        }
    };
    let z = trapezoid(&grid, &pdf);
    if !(z > 0.0) {
        return Err(Error::InsufficientData("density grid misses all samples".into()));
    }
    pdf.iter_mut().for_each(|v| *v /= z);
    Ok((grid, pdf))
}

/// `∫ |p - q|` by the trapezoid rule on a shared grid.
pub fn l1_distance(grid: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    trapezoid(grid, &d)
}

/// Forecast-error saturation level: the RMSE between two independent draws
/// from the invariant measure, `√2 · std` aggregated over components.
pub fn climatological_error(run: &[Vec<f64>]) -> Result<f64> {
    if run.len() < 2 {
        return Err(Error::InsufficientData("need at least two states".into()));
    }
    let d = run[0].len();
    let mut total = 0.0;
    for c in 0..d {
        let col: Vec<f64> = run.iter().map(|s| s[c]).collect();
        total += variance(&col);
    }
    Ok((2.0 * total / d as f64).sqrt())
}

/// Normalized 2D histogram on `[x range] × [y range]` with `bins × bins` cells.
/// Returns `(x centres, y centres, density row-major in x)`.
pub fn histogram2d(
    xs: &[f64],
    ys: &[f64],
    bins: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let wx = (x_range.1 - x_range.0) / bins as f64;
    let wy = (y_range.1 - y_range.0) / bins as f64;
    let mut h = vec![0.0; bins * bins];
    for (&x, &y) in xs.iter().zip(ys) {
        let i = ((x - x_range.0) / wx).floor();
        let j = ((y - y_range.0) / wy).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < bins && (j as usize) < bins {
            h[i as usize * bins + j as usize] += 1.0;
        }
    }
    let total: f64 = h.iter().sum::<f64>() * wx * wy;
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    let cx = (0..bins).map(|i| x_range.0 + (i as f64 + 0.5) * wx).collect();
    let cy = (0..bins).map(|j| y_range.0 + (j as f64 + 0.5) * wy).collect();
    (cx, cy, h)
}
