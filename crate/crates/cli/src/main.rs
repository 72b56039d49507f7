//! Command-line runner for the modelerr experiments.
//!
//! `modelerr run ex4_twoscale --seed 1` writes `results/ex4_twoscale/*.csv`
//! and a `manifest.json` describing the effective configuration.

mod config;
mod experiments;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{apply_set, ConfigFile};
use experiments::{describe, prepare, Artifact, Prepared, IDS};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 1.
    Config(String),
    /// The experiment started and failed: exit code 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "modelerr", version, about = "Run model-error filtering and forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV tables and manifest.
    Run(Target),
    /// Check a configuration without running it.
    Validate(Target),
    /// List the experiment ids.
    List,
}

#[derive(Args)]
struct Target {
    /// Experiment id (see `list`).
    id: String,
    /// TOML file with a `[run]` section and per-experiment sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `[run].seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides `[run].out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a field of the experiment section, e.g. `--set cycles=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// ε values for ex4_twoscale (replaces `eps_grid`).
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
}

struct Resolved {
    prepared: Prepared,
    seed: u64,
    out: PathBuf,
}

fn resolve(t: &Target) -> Result<Resolved, CliError> {
    if !IDS.contains(&t.id.as_str()) {
        return Err(CliError::Config(format!(
            "unknown experiment `{}`; expected one of {}",
            t.id,
            IDS.join(", ")
        )));
    }
    let file = ConfigFile::load(t.config.as_deref())?;
    let mut section = file.section(&t.id)?;
    for s in &t.sets {
        apply_set(&mut section, s)?;
    }
    if !t.eps.is_empty() {
        if t.id != "ex4_twoscale" {
            return Err(CliError::Config("--eps only applies to ex4_twoscale".into()));
        }
        section.insert(
            "eps_grid".into(),
            toml::Value::Array(t.eps.iter().map(|e| toml::Value::Float(*e)).collect()),
        );
    }
    Ok(Resolved {
        prepared: prepare(&t.id, section)?,
        seed: t.seed.unwrap_or(file.run.seed),
        out: t.out.clone().unwrap_or(file.run.out),
    })
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    rows: Option<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    status: &'a str,
    seed: u64,
    config_hash: &'a str,
    code_version: &'a str,
    overrides: &'a [String],
    config: &'a str,
    files: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| io_err(path, e))?;
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).map_err(|e| io_err(&path, e))?;
    write_file(&path, |b| writeln!(b, "{text}"))
}

fn run(t: &Target) -> Result<(), CliError> {
    let Resolved { prepared, seed, out } = resolve(t)?;
    if let Some(p) = &prepared.problem {
        return Err(CliError::Config(format!("{}: {p}", prepared.id)));
    }
    let dir = out.join(&prepared.id);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let (id, hash, toml_text, overrides) = (
        prepared.id.clone(),
        prepared.config_hash.clone(),
        prepared.config_toml.clone(),
        prepared.overrides.clone(),
    );
    let mut manifest = Manifest {
        experiment: &id,
        status: "ok",
        seed,
        config_hash: &hash,
        code_version: env!("CARGO_PKG_VERSION"),
        overrides: &overrides,
        config: &toml_text,
        files: Vec::new(),
        error: None,
    };
    let header = format!("config_hash={hash} seed={seed}");
    eprintln!("running {id} (seed {seed}, {} overrides)", overrides.len());
    let artifacts = match prepared.run(seed) {
        Ok(a) => a,
        Err(e) => {
            let msg = e.to_string();
            let diag = dir.join("diagnostics.txt");
            write_file(&diag, |b| writeln!(b, "# {header}\n{msg}"))?;
            manifest.status = "failed";
            manifest.error = Some(msg.clone());
            manifest.files.push(FileEntry {
                name: "diagnostics.txt".into(),
                rows: None,
            });
            write_manifest(&dir, &manifest)?;
            return Err(CliError::Runtime(format!("{id}: {msg} (see {})", diag.display())));
        }
    };
    for a in &artifacts {
        let name = format!("{}.csv", a.name());
        let path = dir.join(&name);
        let rows = match a {
            Artifact::Table(tab) => {
                let mut buf = Vec::new();
                tab.write_csv(&mut buf, Some(&header)).map_err(|e| io_err(&path, e))?;
                std::fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
                Some(tab.rows().len())
            }
            Artifact::Raw { bytes, .. } => {
                write_file(&path, |b| {
                    writeln!(b, "# {header}")?;
                    b.write_all(bytes)
                })?;
                None
            }
        };
        println!("{}", path.display());
        manifest.files.push(FileEntry { name, rows });
    }
    write_manifest(&dir, &manifest)
}

fn validate(t: &Target) -> Result<(), CliError> {
    let r = resolve(t)?;
    let p = &r.prepared;
    println!("{}: config_hash={} seed={}", p.id, p.config_hash, r.seed);
    println!("{} overrides", p.overrides.len());
    for o in &p.overrides {
        println!("  {o}");
    }
    match &p.problem {
        Some(msg) => Err(CliError::Config(format!("{}: {msg}", p.id))),
        None => {
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::List => {
            for id in IDS {
                println!("{id:<18} {}", describe(id));
            }
            Ok(())
        }
        Command::Run(t) => run(t),
        Command::Validate(t) => validate(t),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
