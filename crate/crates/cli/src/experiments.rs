use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Table;

use modelerr::adaptive::{run_adaptive_experiment, AdaptiveEtkfConfig};
use modelerr::diffusion_forecast::{run_diffusion_experiment, DiffusionConfig};
use modelerr::moments::{run_moments_experiment, MomentsConfig};
use modelerr::semiparametric::{run_semiparam_experiment, SemiparamConfig};
use modelerr::spekf::{run_spekf_experiment, SpekfConfig};
use modelerr::stoch_param::{run_stoch_param_experiment, StochParamConfig};
use modelerr::table::ResultTable;
use modelerr::twoscale_filters::{run_twoscale_experiment, TwoScaleConfig};

use crate::config::{canonical, overrides, typed};
use crate::CliError;

pub const IDS: [&str; 7] = [
    "ex1_moments",
    "ex2_adaptive_etkf",
    "ex3_stoch_param",
    "ex4_twoscale",
    "ex5_spekf",
    "ex6_diffusion",
    "ex7_semiparam",
];

pub fn describe(id: &str) -> &'static str {
    match id {
        "ex1_moments" => "moment closure of the scalar quadratic error model vs Liouville Monte Carlo",
        "ex2_adaptive_etkf" => "ETKF with adaptive banded Q and scalar R on a misspecified Lorenz-96",
        "ex3_stoch_param" => "offline cubic/AR(1) and online closure of the two-layer Lorenz-96",
        "ex4_twoscale" => "reduced filters for the linear two-scale system over an eps grid",
        "ex5_spekf" => "SPEKF and its reduced stochastic filters",
        "ex6_diffusion" => "diffusion-maps density forecast of Lorenz-63",
        "ex7_semiparam" => "semiparametric forecast of Lorenz-96 with a Lorenz-63 driven parameter",
        _ => "",
    }
}

/// A file produced by a run.
pub enum Artifact {
    Table(ResultTable),
    Raw { name: String, bytes: Vec<u8> },
}

impl Artifact {
    pub fn name(&self) -> &str {
        match self {
            Artifact::Table(t) => &t.name,
            Artifact::Raw { name, .. } => name,
        }
    }
}

trait Experiment: Serialize + DeserializeOwned + Default {
    fn check(&self) -> modelerr::Result<()>;
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>>;
}

fn tables(ts: Vec<ResultTable>) -> Vec<Artifact> {
    ts.into_iter().map(Artifact::Table).collect()
}

impl Experiment for MomentsConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_moments_experiment(self, seed)?;
        Ok(tables(vec![r.closure_table, r.oracle_table, r.comparison_table]))
    }
}

impl Experiment for AdaptiveEtkfConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_adaptive_experiment(self, seed)?;
        Ok(tables(vec![r.trace_table, r.summary_table]))
    }
}

impl Experiment for StochParamConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_stoch_param_experiment(self, seed)?;
        Ok(tables(vec![r.fit_table, r.filter_table, r.trace_table, r.pdf_table, r.acf_table]))
    }
}

impl Experiment for TwoScaleConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let (_, table) = run_twoscale_experiment(self, seed)?;
        Ok(tables(vec![table]))
    }
}

impl Experiment for SpekfConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_spekf_experiment(self, seed)?;
        Ok(tables(vec![r.rmse_table, r.table, r.cycles]))
    }
}

impl Experiment for DiffusionConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_diffusion_experiment(self, seed)?;
        let (mut points, mut phi, mut spectrum) = (Vec::new(), Vec::new(), Vec::new());
        r.basis.write_csv(&mut points, &mut phi, &mut spectrum)?;
        let mut out = tables(vec![r.summary_table, r.moments_table, r.snapshot_table, r.spectrum_table]);
        for (name, bytes) in [("ex6_basis_points", points), ("ex6_basis_phi", phi), ("ex6_basis_spectrum", spectrum)] {
            out.push(Artifact::Raw {
                name: name.into(),
                bytes,
            });
        }
        Ok(out)
    }
}

impl Experiment for SemiparamConfig {
    fn check(&self) -> modelerr::Result<()> {
        self.validate()
    }
    fn execute(&self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        let r = run_semiparam_experiment(self, seed)?;
        Ok(tables(vec![r.rmse_table, r.theta_table, r.summary_table]))
    }
}

type Runner = Box<dyn FnOnce(u64) -> modelerr::Result<Vec<Artifact>>>;

/// A typed, validated experiment ready to run.
pub struct Prepared {
    pub id: String,
    pub config_toml: String,
    pub config_hash: String,
    pub overrides: Vec<String>,
    /// Validation failure, if any; `run` refuses to start when set.
    pub problem: Option<String>,
    runner: Runner,
}

impl Prepared {
    pub fn run(self, seed: u64) -> modelerr::Result<Vec<Artifact>> {
        (self.runner)(seed)
    }
}

fn prepare_as<T: Experiment + 'static>(id: &str, table: Table) -> Result<Prepared, CliError> {
    let cfg: T = typed(id, table)?;
    let (config_toml, config_hash) = canonical(id, &cfg)?;
    Ok(Prepared {
        id: id.to_string(),
        config_toml,
        config_hash,
        overrides: overrides(&cfg)?,
        problem: cfg.check().err().map(|e| e.to_string()),
        runner: Box::new(move |seed| cfg.execute(seed)),
    })
}

pub fn prepare(id: &str, table: Table) -> Result<Prepared, CliError> {
    match id {
        "ex1_moments" => prepare_as::<MomentsConfig>(id, table),
        "ex2_adaptive_etkf" => prepare_as::<AdaptiveEtkfConfig>(id, table),
        "ex3_stoch_param" => prepare_as::<StochParamConfig>(id, table),
        "ex4_twoscale" => prepare_as::<TwoScaleConfig>(id, table),
        "ex5_spekf" => prepare_as::<SpekfConfig>(id, table),
        "ex6_diffusion" => prepare_as::<DiffusionConfig>(id, table),
        "ex7_semiparam" => prepare_as::<SemiparamConfig>(id, table),
        other => Err(CliError::Config(format!(
            "unknown experiment `{other}`; run `modelerr list` for the available ids"
        ))),
    }
}
