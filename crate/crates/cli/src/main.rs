//! `hawkes-lab`: config-driven experiments for Hawkes processes and their
//! scaling limits.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<hawkes_scaling::Error> for CliError {
    fn from(e: hawkes_scaling::Error) -> Self {
        match e {
            hawkes_scaling::Error::InvalidInput(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "hawkes-lab", version, about = "Hawkes scaling-limit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resolvent, its integral and the Laplace-identity residual.
    Resolvent(RunArgs),
    /// Monte Carlo Fourier–Laplace functional against the Riccati formula.
    FlVerify(RunArgs),
    /// Rescaled Riccati functionals against the limit along a sequence of n.
    ScalingStudy(RunArgs),
    /// Stochastic Volterra ensembles with mean and variance audits.
    Sve(RunArgs),
    /// Potential measure by several routes with cross-method gaps.
    Potential(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

type Runner = fn(&ExperimentConfig, &Path) -> Result<Vec<PathBuf>, CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, cmd): (&RunArgs, Runner) = match &cli.command {
        Command::Resolvent(a) => (a, commands::resolvent),
        Command::FlVerify(a) => (a, commands::fl_verify),
        Command::ScalingStudy(a) => (a, commands::scaling_study),
        Command::Sve(a) => (a, commands::sve),
        Command::Potential(a) => (a, commands::potential),
    };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    for file in cmd(&cfg, &out)? {
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hawkes-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
