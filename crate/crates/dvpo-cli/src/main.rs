//! Command line entry point for training runs, sweeps, and comparisons.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Errors surfaced to the shell, bucketed by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config file, flag value, or parameter path. Exit code 2.
    Config(String),
    /// Training blew up (runaway loss or non-finite numbers). Exit code 3.
    Diverged(String),
    /// Anything else, e.g. IO trouble. Exit code 1.
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Diverged(m) | CliError::Other(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dvpo", version, about = "Distributional value training on small noisy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one config across one or more seeds.
    Run {
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; one seed-N subdirectory per run.
        #[arg(long)]
        out: PathBuf,
        /// Seed override, repeatable. Without it the config's seed runs.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Algorithm override: dvpo, ppo, robust_bellman, or grpo.
        #[arg(long)]
        algo: Option<String>,
    },
    /// Rerun one config while stepping a single parameter over a value list.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        algo: Option<String>,
        /// Dotted path into the config, e.g. losses.tail_alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values to substitute at the parameter path.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Train several algorithms on paired seeds and tabulate the gaps.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Algorithm to include, repeatable; the first is the baseline.
        #[arg(long = "algo", required = true)]
        algos: Vec<String>,
    },
    /// Parse and validate a config file without training.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

/// DVPO_LOG_LEVEL picks the log filter: error, info (default), or debug.
fn init_logging() {
    let level = match std::env::var("DVPO_LOG_LEVEL") {
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                eprintln!("warning: unknown DVPO_LOG_LEVEL {other:?}, using info");
                log::LevelFilter::Info
            }
        },
        Err(_) => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            algo,
        } => commands::cmd_run(config, out, seeds, algo),
        Command::Sweep {
            config,
            out,
            seeds,
            algo,
            param,
            values,
        } => commands::cmd_sweep(config, out, seeds, algo, param, values),
        Command::Compare {
            config,
            out,
            seeds,
            algos,
        } => commands::cmd_compare(config, out, seeds, algos),
        Command::ValidateConfig { config } => commands::cmd_validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
