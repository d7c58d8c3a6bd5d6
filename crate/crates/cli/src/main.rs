//! `primekit`: data generation, training, evaluation and report commands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] primekit_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config(_) => "schema",
            CliError::Usage(_) => "usage",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "primekit", version, about = "Cue-driven priming experiments on synthetic shapes")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    GenData,
    /// Train a base network.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train priming weights against a frozen base network.
    TrainPriming {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Block mask bits, e.g. 1100.
        #[arg(long, conflicts_with = "layers")]
        mask: Option<String>,
        /// Comma-separated conv layer indices.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Compare free viewing, pruning and priming on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        priming: Option<PathBuf>,
        /// Comma-separated strategy names.
        #[arg(long)]
        strategies: Option<String>,
    },
    /// Train and score priming per block mask or layer prefix.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Comma-separated block masks.
        #[arg(long, conflicts_with = "prefixes")]
        masks: Option<String>,
        /// Comma-separated layer-prefix lengths.
        #[arg(long)]
        prefixes: Option<String>,
    },
    /// Evaluate strategies under increasing Gaussian noise.
    SweepNoise {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        priming: Option<PathBuf>,
        /// Comma-separated standard deviations in 8-bit steps.
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        strategies: Option<String>,
    },
}

fn init_logging() {
    let level = match std::env::var("PRIMEKIT_LOG").as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Error,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
