//! Command-line driver: configuration, persistence and the `mfgmv` commands.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 fixed point did
//! not converge (partial results kept), 3 solution invariant violated,
//! 4 validation check failed.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod store;
pub mod suite;

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use mfgmv_core::Error;

use crate::commands::{SimulateOptions, SolveOptions, ValidateOptions};
use crate::config::{ConfigError, EngineConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(ConfigError),
    #[error("{0}")]
    Core(Error),
    #[error("{0}")]
    Checkpoint(checkpoint::LoadError),
    #[error("cannot access {0}: {1}")]
    Io(String, std::io::Error),
    #[error("invalid solution directory: {0}")]
    Solution(String),
    #[error("solution invariants violated: {}", .0.join("; "))]
    InvariantsFailed(Vec<String>),
    #[error("validation checks failed: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Core(e) => e.code(),
            CliError::Checkpoint(_) => "CheckpointError",
            CliError::Io(..) => "IoError",
            CliError::Solution(_) => "BadSolution",
            CliError::InvariantsFailed(_) => "InvariantViolation",
            CliError::ChecksFailed(_) => "ChecksFailed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::NoConvergence { .. } | Error::PicardDivergence { .. } => 2,
                Error::InvariantViolation(_)
                | Error::NonMonotone { .. }
                | Error::MassLoss { .. }
                | Error::NegativeDensity { .. }
                | Error::PathOutOfRange { .. } => 3,
                Error::InvalidInput(_)
                | Error::SingularVolatility { .. }
                | Error::DegenerateLambda { .. }
                | Error::DomainTooSmall(_)
                | Error::OutOfRange { .. } => 1,
            },
            CliError::InvariantsFailed(_) => 3,
            CliError::ChecksFailed(_) => 4,
            CliError::Config(_) | CliError::Checkpoint(_) | CliError::Io(..) | CliError::Solution(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Debug, Parser)]
#[command(name = "mfgmv", version, about = "Mean-field equilibria for peer-relative mean-variance investors")]
pub struct Cli {
    #[arg(long, value_enum, default_value = "info", global = true)]
    pub log: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the width continuation and write the solution directory.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the smallest admissible mollifier width.
        #[arg(long)]
        epsilon_floor: Option<f64>,
    },
    /// Run the validation battery against a stored solution.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        /// Report directory; defaults to the solution directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Paths for the Monte Carlo and martingale checks.
        #[arg(long)]
        paths: Option<usize>,
        /// Skip the first-order and finite-population checks.
        #[arg(long)]
        core_only: bool,
        #[arg(long, hide = true, default_value_t = 0.0)]
        drift_bias: f64,
    },
    /// Simulate the stored equilibrium and compare the mean with the curve.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Paths written to paths.csv.
        #[arg(long, default_value_t = 100)]
        write_paths: usize,
    },
    /// Write the stored solution grids as CSV.
    Export {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve and validate every experiment of a manifest.
    Suite {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "suite_out")]
        out: PathBuf,
    },
}

pub fn init_logging(level: LogLevel) {
    let filter = match level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, record| writeln!(buf, "{} {}", record.level(), record.args()))
        .try_init();
}

/// Worker count requested through `MFGMV_THREADS` (0 or unset means automatic).
pub fn configure_threads() {
    let requested = std::env::var("MFGMV_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    if let Some(n) = requested.filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("worker pool already initialized; MFGMV_THREADS ignored");
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve { config, out, epsilon_floor } => {
            let cfg = EngineConfig::load(&config).map_err(CliError::Config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            commands::solve(&cfg, &out, &SolveOptions { epsilon_floor })?;
            Ok(())
        }
        Command::Validate { config, solution, out, seed, paths, core_only, drift_bias } => {
            let cfg = EngineConfig::load(&config).map_err(CliError::Config)?;
            let out = out.unwrap_or_else(|| solution.clone());
            let opts = ValidateOptions { seed, paths, drift_bias, core_only };
            let report = commands::validate(&cfg, &solution, &out, &opts)?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::ChecksFailed(report.failures().into_iter().map(String::from).collect()))
            }
        }
        Command::Simulate { config, solution, out, paths, seed, write_paths } => {
            let cfg = EngineConfig::load(&config).map_err(CliError::Config)?;
            let out = out.unwrap_or_else(|| solution.join("simulation"));
            commands::simulate(&cfg, &solution, &out, &SimulateOptions { paths, seed, write_paths })?;
            Ok(())
        }
        Command::Export { solution, out } => {
            let out = out.unwrap_or_else(|| solution.join("export"));
            commands::export(&solution, &out)?;
            Ok(())
        }
        Command::Suite { manifest, out } => {
            let m = suite::Manifest::load(&manifest).map_err(CliError::Config)?;
            let report = suite::run_suite(&m, &out)?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::ChecksFailed(report.failures().into_iter().map(String::from).collect()))
            }
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    init_logging(cli.log);
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("code={} {e}", e.code());
            e.exit_code()
        }
    }
}
