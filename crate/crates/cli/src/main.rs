//! `hypersci` command-line driver.
//!
//! Every command reads one TOML config, validates it completely, then writes
//! its outputs into a run directory together with the resolved config.
//! Failures print a one-line JSON report on stderr and exit with 2 (config)
//! or 3 (runtime).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: &'a str,
    exit_code: u8,
}

#[derive(Debug, Parser)]
#[command(name = "hypersci", version, about = "Treatment effect estimation under hypergraph interference")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides every seed in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a semi-synthetic dataset directory.
    Simulate,
    /// Train one variant and write checkpoint, metrics and loss history.
    Train {
        /// Dataset directory (overrides `dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a saved checkpoint against a dataset's true effects.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run every method over every seed.
    Compare,
    /// Run a comparison at every value of one parameter.
    Sweep,
    /// Bucket the disagreement of two estimators by neighbourhood size and
    /// treatment homophily.
    CaseStudy {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve(global.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::runtime)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads(cli.global.threads)?;
    let mut cfg = load_config(&cli.global)?;
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("hypersci_out"));
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Train { dataset } => {
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            commands::train(&cfg, &out)
        }
        Command::Evaluate { checkpoint, dataset } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            commands::evaluate(&cfg, &out)
        }
        Command::Compare => commands::compare(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::CaseStudy { dataset } => {
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            commands::case_study(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: ErrorBody {
                    kind: e.kind(),
                    message: e.message(),
                    exit_code: e.exit_code(),
                },
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
