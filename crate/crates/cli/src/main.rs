use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moire_vmc::checkpoint::CheckpointError;

mod commands;
mod config;
mod manifest;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MOIRE_VMC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn checkpoint(path: &Path, e: CheckpointError) -> CliError {
        match e {
            CheckpointError::Mismatch(_) => CliError::Config(format!("{}: {e}", path.display())),
            _ => CliError::io(path, e),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "moire-vmc", version, about = "Neural-network VMC for electrons in a honeycomb moire potential")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the wavefunction, then run any later phases listed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a trained state with a frozen step size and export snapshots.
    Measure {
        #[arg(long)]
        ckpt: PathBuf,
        /// Retained samples per walker.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute observables from exported snapshots.
    Analyze {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact diagonalization reference for a two-electron system.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Measure { ckpt, steps, out } => commands::measure(&ckpt, steps, out.as_deref()),
        Command::Analyze { samples, out } => commands::analyze_cmd(&samples, out.as_deref()),
        Command::Oracle { config } => commands::oracle(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moire-vmc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
