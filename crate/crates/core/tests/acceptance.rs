//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Every experiment runs at its default configuration with master seed 1.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use modelerr::adaptive::{run_adaptive_experiment, AdaptiveEtkfConfig};
use modelerr::diffusion_forecast::{run_diffusion_experiment, DiffusionConfig};
use modelerr::exec::{self, Mode};
use modelerr::kalman::{etkf_analysis, kf_analysis, kf_forecast, Ensemble, EtkfOptions, GaussianBelief, LinearObs};
use modelerr::linalg::sym_eigenvalues;
use modelerr::moments::{decompose_error, run_moments_experiment, MomentsConfig};
use modelerr::rng;
use modelerr::semiparametric::{run_semiparam_experiment, SemiparamConfig};
use modelerr::spekf::{run_spekf_experiment, SpekfConfig};
use modelerr::stoch_param::{run_stoch_param_experiment, StochParamConfig};
use modelerr::table::ResultTable;
use modelerr::twoscale_filters::{run_twoscale_experiment, ReducedVariant, TwoScaleConfig};

const SEED: u64 = 1;

#[derive(Default)]
struct Report {
    passed: usize,
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stdout().flush();
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(name.to_string());
        }
    }

    fn error(&mut self, name: &str, e: modelerr::Error) {
        self.check(name, false, format!("run failed: {e}"));
    }
}

fn section(title: &str) -> Instant {
    println!("== {title}");
    Instant::now()
}

fn done(t: Instant) {
    println!("   ({:.1} s)", t.elapsed().as_secs_f64());
}

fn ex1(rep: &mut Report) {
    let t = section("ex1 moments");
    match run_moments_experiment(&MomentsConfig::default(), SEED) {
        Ok(run) => {
            rep.check(
                "ex1 closure mean within 2% of the Liouville oracle on [0, 0.5]",
                run.max_rel_mean_error <= 0.02,
                format!("max relative error {:.4}", run.max_rel_mean_error),
            );
            rep.check(
                "ex1 oracle escapes at most 0.1%",
                run.oracle.escaped_frac <= 1e-3,
                format!("escaped fraction {}", run.oracle.escaped_frac),
            );
        }
        Err(e) => rep.error("ex1 moments", e),
    }
    let mut g = rng::stream(SEED, "acceptance_decompose", 0);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (dim, n) = (1 + case % 5, 2 + 7 * case);
        let draw = |g: &mut rng::Rng| DVector::from_fn(dim, |_, _| g.sample::<f64, _>(StandardNormal));
        let truth: Vec<_> = (0..n).map(|_| draw(&mut g)).collect();
        let model: Vec<_> = truth.iter().map(|x| 0.7 * x + draw(&mut g)).collect();
        worst = worst.max(decompose_error(&truth, &model).unwrap().identity_residual);
    }
    rep.check(
        "ex1 decompose_error identity residual < 1e-12",
        worst < 1e-12,
        format!("max residual {worst:.2e} over 20 paired samples"),
    );
    done(t);
}

fn ex2(rep: &mut Report) {
    let t = section("ex2 adaptive ETKF");
    let run = match run_adaptive_experiment(&AdaptiveEtkfConfig::default(), SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex2 adaptive ETKF", e),
    };
    let by = |k: usize| run.runs.iter().find(|r| r.ensemble == k).unwrap();
    let (a, b) = (by(10), by(20));
    let cmp = |name: &str, small: f64, large: f64, rep: &mut Report| {
        rep.check(name, large < small, format!("k=10 {small:.4}, k=20 {large:.4}"));
    };
    cmp("ex2 time-mean |r-1| smaller at k=20", a.mean_abs_r_error, b.mean_abs_r_error, rep);
    cmp("ex2 time-mean q1 smaller at k=20", a.mean_q1, b.mean_q1, rep);
    cmp("ex2 time-mean |q2| smaller at k=20", a.mean_abs_q2, b.mean_abs_q2, rep);
    cmp("ex2 posterior-mean RMSE at x_10 smaller at k=20", a.site_rmse, b.site_rmse, rep);
    done(t);
}

fn ex3(rep: &mut Report) {
    let t = section("ex3 stochastic parameterization");
    let cfg = StochParamConfig::default();
    let run = match run_stoch_param_experiment(&cfg, SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex3 stochastic parameterization", e),
    };
    let o = run.offline;
    rep.check(
        "ex3 (a) constrained fit alpha in [0.41, 0.55]",
        (0.41..=0.55).contains(&o.alpha),
        format!("alpha {:.4}", o.alpha),
    );
    rep.check(
        "ex3 (a) constrained fit sigma in [1.86, 2.52]",
        (1.86..=2.52).contains(&o.sigma),
        format!("sigma {:.4}", o.sigma),
    );
    let c = run.cubic;
    rep.check(
        "ex3 (b) cubic fit signs zeta<0, alpha>0, beta<0, gamma<0, phi>0.98",
        c.zeta < 0.0 && c.alpha > 0.0 && c.beta < 0.0 && c.gamma < 0.0 && c.phi > 0.98,
        format!(
            "zeta {:.4} alpha {:.4} beta {:.5} gamma {:.6} phi {:.5}",
            c.zeta, c.alpha, c.beta, c.gamma, c.phi
        ),
    );
    for &dt in &cfg.dt_obs_grid {
        let (on, off) = (run.rmse("online", dt).unwrap(), run.rmse("offline", dt).unwrap());
        rep.check(
            &format!("ex3 (c) online RMSE < offline RMSE at dt_obs={dt}"),
            on < off,
            format!("online {on:.4}, offline {off:.4}"),
        );
    }
    let clim = &run.climatology;
    let idx = |l: &str| clim.index(l).unwrap();
    let (full, off, on) = (idx("full"), idx("offline"), idx("online"));
    rep.check(
        "ex3 (d) online pdf L1-closer to the full model than offline",
        clim.l1[on] < clim.l1[off],
        format!("L1 online {:.4}, offline {:.4}", clim.l1[on], clim.l1[off]),
    );
    let tail = |a: &[f64]| {
        let lo = (2.0 / cfg.fit_dt).round() as usize + 1;
        a[lo..].iter().map(|v| v.abs()).sum::<f64>() / (a.len() - lo) as f64
    };
    let (ao, af) = (tail(&clim.acfs[off]), tail(&clim.acfs[full]));
    rep.check(
        "ex3 (d) offline ACF exceeds full-model ACF beyond 2 time units",
        ao > af,
        format!("mean |acf| on (2, 4]: offline {ao:.4}, full {af:.4}"),
    );
    done(t);
}

fn ex4(rep: &mut Report) {
    let t = section("ex4 linear two-scale");
    let (results, _) = match run_twoscale_experiment(&TwoScaleConfig::default(), SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex4 linear two-scale", e),
    };
    let pos = |v: ReducedVariant| ReducedVariant::ALL.iter().position(|x| *x == v).unwrap();
    let (rsf, rsfa, opt) = (pos(ReducedVariant::Rsf), pos(ReducedVariant::Rsfa), pos(ReducedVariant::Opt));
    let worst_opt = results
        .iter()
        .map(|r| (r.reduced[opt].mse / r.truth.mse - 1.0).abs())
        .fold(0.0, f64::max);
    rep.check(
        "ex4 (a) MSE(OPT) within 5% of MSE(true) for all eps",
        worst_opt <= 0.05,
        format!("max relative gap {worst_opt:.4}"),
    );
    let last = results.iter().find(|r| r.eps == 1.0).unwrap();
    let ratio = last.reduced[rsf].mse / last.truth.mse;
    rep.check(
        "ex4 (b) MSE(RSF) >= 1.2 MSE(true) at eps=1",
        ratio >= 1.2,
        format!("ratio {ratio:.4}"),
    );
    let consistency = results
        .iter()
        .flat_map(|r| [r.truth, r.reduced[opt]])
        .map(|s| (s.mse - s.p_post).abs() / s.p_post)
        .fold(0.0, f64::max);
    rep.check(
        "ex4 (c) |MSE - Pa|/Pa <= 10% for true and OPT filters",
        consistency <= 0.1,
        format!("max {consistency:.4}"),
    );
    for r in results.iter().filter(|r| r.eps >= 0.5) {
        for (name, i) in [("RSF", rsf), ("RSFA", rsfa)] {
            let s = r.reduced[i];
            rep.check(
                &format!("ex4 (c) {name} Pa < MSE at eps={}", r.eps),
                s.p_post < s.mse,
                format!("Pa {:.5}, MSE {:.5}", s.p_post, s.mse),
            );
        }
    }
    done(t);
}

fn ex5(rep: &mut Report) {
    let t = section("ex5 SPEKF");
    let run = match run_spekf_experiment(&SpekfConfig::default(), SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex5 SPEKF", e),
    };
    let r = |l: &str| run.rmse(l).unwrap();
    let (s, rs, a, f) = (r("spekf"), r("rspekf"), r("rsfa"), r("rsf"));
    rep.check(
        "ex5 RMSE(SPEKF) <= RMSE(RSPEKF) < RMSE(RSFA) < RMSE(RSF)",
        s <= rs && rs < a && a < f,
        format!("{s:.4} / {rs:.4} / {a:.4} / {f:.4}, sqrt(R) {:.4}", run.r.sqrt()),
    );
    rep.check(
        "ex5 RSPEKF within 15% of SPEKF",
        (rs / s - 1.0).abs() <= 0.15,
        format!("ratio {:.4}", rs / s),
    );
    done(t);
}

fn ex6(rep: &mut Report) {
    let t = section("ex6 diffusion forecast");
    let run = match run_diffusion_experiment(&DiffusionConfig::default(), SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex6 diffusion forecast", e),
    };
    rep.check(
        "ex6 basis orthonormality residual <= 0.05",
        run.orthonormality <= 0.05,
        format!("{:.4}", run.orthonormality),
    );
    rep.check(
        "ex6 stabilized operator has spectral radius 1 and fixed vector e1 (<= 1e-6)",
        (run.spectral_radius - 1.0).abs() <= 1e-6 && run.fixed_vector_residual <= 1e-6,
        format!(
            "radius {:.8}, fixed-vector residual {:.2e}",
            run.spectral_radius, run.fixed_vector_residual
        ),
    );
    rep.check(
        "ex6 long-horizon L1 distance to p_eq <= 0.05",
        run.long_horizon_l1 <= 0.05,
        format!("{:.4} after 20 correlation times", run.long_horizon_l1),
    );
    let m = &run.comparison;
    rep.check(
        "ex6 t=0.5 forecast first two moments within 10% of the ensemble oracle",
        m.mean_rel_err <= 0.1 && m.second_rel_err <= 0.1,
        format!("mean {:.4}, second moment {:.4}", m.mean_rel_err, m.second_rel_err),
    );
    rep.check(
        "ex6 shuffled-data control one-step L1 to p_eq <= 0.05",
        run.shuffled_l1 <= 0.05,
        format!("{:.4} (sampling floor {:.4})", run.shuffled_l1, run.shuffled_noise_floor),
    );
    done(t);
}

fn ex7(rep: &mut Report) {
    let t = section("ex7 semiparametric forecast");
    let run = match run_semiparam_experiment(&SemiparamConfig::default(), SEED) {
        Ok(r) => r,
        Err(e) => return rep.error("ex7 semiparametric forecast", e),
    };
    let n = run.leads.len();
    let early: Vec<usize> = (0..n).filter(|&i| run.leads[i] > 0.0 && run.leads[i] < 1.0).collect();
    let worst = early
        .iter()
        .map(|&i| run.rmse_perfect[i] - run.rmse_semiparam[i].min(run.rmse_l96[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    rep.check(
        "ex7 perfect model lowest RMSE at leads in (0, 1)",
        worst < 0.0,
        format!("max(perfect - best other) {worst:.4} over {} leads", early.len()),
    );
    let late: Vec<usize> = (0..n).filter(|&i| run.leads[i] > 2.0).collect();
    let excess = late
        .iter()
        .map(|&i| run.rmse_semiparam[i] - run.rmse_l96[i])
        .fold(f64::NEG_INFINITY, f64::max);
    rep.check(
        "ex7 semiparametric RMSE <= L96-only RMSE at leads > 2",
        excess <= 0.0,
        format!("max(semiparametric - L96) {excess:.4} over {} leads", late.len()),
    );
    let i10 = (0..n).min_by(|&a, &b| (run.leads[a] - 10.0).abs().total_cmp(&(run.leads[b] - 10.0).abs())).unwrap();
    let gap = [run.rmse_perfect[i10], run.rmse_semiparam[i10], run.rmse_l96[i10]]
        .iter()
        .map(|v| (v / run.clim_error - 1.0).abs())
        .fold(0.0, f64::max);
    rep.check(
        "ex7 all curves within 10% of climatological error at lead 10",
        gap <= 0.1,
        format!("max relative gap {gap:.4} (clim {:.4})", run.clim_error),
    );
    let peak = run.rmse_semiparam.iter().copied().fold(0.0, f64::max) / run.clim_error;
    rep.check(
        "ex7 semiparametric never exceeds climatological error by more than 3%",
        peak <= 1.03,
        format!("max RMSE / clim {peak:.4}"),
    );
    done(t);
}

/// Prior-variance fixed point of `p = F² pR/(p+R) + Q` by bisection.
fn riccati_bisection(f: f64, q: f64, r: f64) -> f64 {
    let g = |p: f64| f * f * p * r / (p + r) + q - p;
    let (mut lo, mut hi) = (q, q + f * f * r);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn csv_bytes(t: &ResultTable) -> Vec<u8> {
    let mut b = Vec::new();
    t.write_csv(&mut b, None).unwrap();
    b
}

fn filter_core(rep: &mut Report) {
    let t = section("filter core");
    let mut worst: f64 = 0.0;
    for &(f, q, r) in &[(0.9, 0.5, 1.0), (0.135_335, 0.490_842, 0.3), (1.2, 0.1, 2.0), (0.5, 2.0, 0.05)] {
        let obs = LinearObs::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, r)).unwrap();
        let (fm, qm) = (DMatrix::from_element(1, 1, f), DMatrix::from_element(1, 1, q));
        let mut b = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        for _ in 0..500 {
            b = kf_forecast(&kf_analysis(&b, &DVector::zeros(1), &obs).unwrap(), &fm, &qm);
        }
        let p = riccati_bisection(f, q, r);
        worst = worst.max((b.cov[(0, 0)] - p).abs() / p);
    }
    rep.check(
        "core Riccati iteration matches the bisection fixed point to 1e-8",
        worst <= 1e-8,
        format!("max relative error {worst:.2e}"),
    );

    let mut g = rng::stream(SEED, "acceptance_core", 0);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (d, m, k) = (2 + case % 4, 1 + case % 3, 6 + case % 5);
        let raw = DMatrix::from_fn(d, d, |_, _| g.sample::<f64, _>(StandardNormal));
        let cov = &raw * raw.transpose() + DMatrix::identity(d, d) * 0.2;
        let prior = GaussianBelief::new(DVector::from_fn(d, |_, _| g.sample::<f64, _>(StandardNormal)), cov).unwrap();
        let ens = Ensemble::with_moments(&prior, k, &mut g).unwrap();
        let h = DMatrix::from_fn(m, d, |_, _| g.sample::<f64, _>(StandardNormal));
        let obs = LinearObs::new(h, DMatrix::identity(m, m) * 0.5).unwrap();
        let v = DVector::from_fn(m, |_, _| g.sample::<f64, _>(StandardNormal));
        let kf = kf_analysis(&prior, &v, &obs).unwrap();
        let et = etkf_analysis(&ens, &v, &obs, None, &EtkfOptions::default(), &mut g).unwrap();
        worst = worst.max((et.ensemble.mean() - &kf.mean).amax());
    }
    rep.check(
        "core ETKF mean equals the Kalman mean within 1e-8",
        worst <= 1e-8,
        format!("max abs difference {worst:.2e} over 50 linear Gaussian cases"),
    );

    let mut bad = 0;
    let mut min_eig = f64::INFINITY;
    for case in 0..1000 {
        let (d, m) = (1 + case % 6, 1 + case % 4);
        let raw = DMatrix::from_fn(d, d, |_, _| g.sample::<f64, _>(StandardNormal));
        let p = &raw * raw.transpose() + DMatrix::identity(d, d) * 1e-3;
        let h = DMatrix::from_fn(m, d, |_, _| g.sample::<f64, _>(StandardNormal));
        let r = 0.01 + 5.0 * g.random::<f64>();
        let obs = LinearObs::new(h, DMatrix::identity(m, m) * r).unwrap();
        let b = GaussianBelief::new(DVector::zeros(d), p.clone()).unwrap();
        let a = kf_analysis(&b, &DVector::zeros(m), &obs).unwrap();
        let low = sym_eigenvalues(&(&p - &a.cov)).into_iter().fold(f64::INFINITY, f64::min) / p.amax();
        min_eig = min_eig.min(low);
        if low < -1e-10 {
            bad += 1;
        }
    }
    rep.check(
        "core posterior <= prior covariance on 1000 random SPD instances",
        bad == 0,
        format!("{bad} violations, min scaled eigenvalue of Pb - Pa {min_eig:.2e}"),
    );

    let cfg = AdaptiveEtkfConfig {
        n: 12,
        cycles: 120,
        discard: 20,
        ensembles: vec![8, 16],
        spinup: 2.0,
        ..Default::default()
    };
    let tables = || {
        let run = run_adaptive_experiment(&cfg, 9).unwrap();
        (csv_bytes(&run.trace_table), csv_bytes(&run.summary_table))
    };
    let first = tables();
    let second = tables();
    let before = exec::mode();
    exec::set_mode(Mode::Sequential);
    let sequential = tables();
    exec::set_mode(before);
    rep.check(
        "core reruns are byte-identical",
        first == second && first == sequential,
        format!(
            "rerun {}, sequential {}",
            if first == second { "identical" } else { "differs" },
            if first == sequential { "identical" } else { "differs" }
        ),
    );
    done(t);
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| a.starts_with("ex") || a == "core");
    let suites: [(&str, fn(&mut Report)); 8] = [
        ("core", filter_core),
        ("ex1", ex1),
        ("ex2", ex2),
        ("ex3", ex3),
        ("ex4", ex4),
        ("ex5", ex5),
        ("ex6", ex6),
        ("ex7", ex7),
    ];
    let mut rep = Report::default();
    let start = Instant::now();
    for (name, run) in suites {
        if filter.as_deref().is_none_or(|f| f == name) {
            run(&mut rep);
        }
    }
    println!(
        "acceptance: {} passed, {} failed ({:.0} s)",
        rep.passed,
        rep.failed.len(),
        start.elapsed().as_secs_f64()
    );
    for f in &rep.failed {
        println!("  failed: {f}");
    }
    if rep.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
