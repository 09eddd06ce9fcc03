//! `thermoformer`: simulate datasets, train, evaluate, run transfer studies
//! and nested building sweeps.
//!
//! Every subcommand takes `--config <file.json>` plus any number of
//! `--key=value` overrides with dotted keys (`--model.hidden_dim=16`).
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric fault.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thermoformer_core::evaluation::BaselineKind;

pub const THREADS_ENV: &str = "THERMOFORMER_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] thermoformer_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use thermoformer_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) => 1,
                E::NumericFault(_) | E::Dimension { .. } => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "thermoformer",
    version,
    about = "Building thermal forecasting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `--out` (or `data_dir`).
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test and validation splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline to report alongside the model; repeatable.
        #[arg(long, value_parser = parse_baseline)]
        baseline: Vec<BaselineKind>,
    },
    /// Cross-climate transfer matrix over two or more checkpoints.
    Transfer {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
    },
    /// Train on nested building subsets and evaluate each.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse()
        .map_err(|e: thermoformer_core::Error| e.to_string())
}

/// Options clap owns; any other `--key=value` is a config override.
const FLAGS: [&str; 6] = ["config", "data", "out", "checkpoint", "baseline", "help"];

fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if !FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got '{value}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { mut common } => {
            // the dataset directory is the output of simulate
            if let Some(out) = common.out.take() {
                common.data = Some(out);
            }
            commands::simulate(&commands::prepare(&common, overrides)?)
        }
        Command::Train { common } => commands::train(&commands::prepare(&common, overrides)?),
        Command::Evaluate {
            common,
            checkpoint,
            baseline,
        } => commands::evaluate(
            &commands::prepare(&common, overrides)?,
            &checkpoint,
            &baseline,
        ),
        Command::Transfer {
            common,
            checkpoints,
        } => {
            if checkpoints.len() < 2 {
                return Err(CliError::Usage(format!(
                    "transfer needs at least 2 checkpoints, got {}",
                    checkpoints.len()
                )));
            }
            commands::transfer(&commands::prepare(&common, overrides)?, &checkpoints)
        }
        Command::Sweep { common } => commands::sweep(&commands::prepare(&common, overrides)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
