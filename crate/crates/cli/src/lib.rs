//! Command-line driver: dataset generation, training, field evaluation,
//! planner benchmarks, oracle grids and artifact export.

pub mod artifacts;
mod bench;
pub mod config;
mod eval;
mod export;
mod gen_data;
mod oracle;
mod plot;
mod providers;
mod train;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "qflow", version, about = "Distributional configuration-space distance fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set bench.trials=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample collision sets and write a training dataset.
    GenData,
    /// Train a flow model on a dataset.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare field providers against the oracle on a query grid.
    EvalField,
    /// Run the projection or trajectory benchmark.
    Bench,
    /// Build brute-force collision grids.
    OracleBuild,
    /// Convert a dataset, checkpoint or grid into text.
    Export {
        input: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::EvalField => "eval-field",
            Command::Bench => "bench",
            Command::OracleBuild => "oracle-build",
            Command::Export { .. } => "export",
            Command::Config => "config",
        }
    }
}

/// What a finished command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// False when a requested assertion failed.
    pub passed: bool,
    pub messages: Vec<String>,
}

impl Outcome {
    fn ok(files: Vec<PathBuf>) -> Self {
        Self {
            files,
            passed: true,
            messages: Vec::new(),
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    // Paths given on the command line are relative to the working directory.
    if let Command::Train { resume: Some(p) } = &cli.command {
        cfg.train.resume = Some(std::path::absolute(p)?);
    }
    if let Command::Export { input: Some(p) } = &cli.command {
        cfg.export.input = Some(std::path::absolute(p)?);
    }
    let out = cfg.resolve_out_dir(cli.global.out.as_deref());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building thread pool")?;
    pool.install(|| run_command(&cli.command, &cfg, &out))
}

pub fn run_command(command: &Command, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    if let Command::Config = command {
        print!("{}", cfg.to_toml());
        return Ok(Outcome::ok(Vec::new()));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::GenData => gen_data::run(cfg, out),
        Command::Train { .. } => train::run(cfg, out),
        Command::EvalField => eval::run(cfg, out),
        Command::Bench => bench::run(cfg, out),
        Command::OracleBuild => oracle::run(cfg, out),
        Command::Export { .. } => export::run(cfg, out),
        Command::Config => unreachable!(),
    }
}

/// Artifact paths in the config are relative to the output directory.
pub(crate) fn in_out(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

pub(crate) fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        anyhow::bail!("{what} not found: {}", p.display());
    }
    Ok(())
}
