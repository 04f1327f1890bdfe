//! `pgdm`: generate or ingest data, fit archetypes, train, forecast, evaluate
//! and certify. Every stage reads and writes versioned JSON artifacts.

mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ForecastFormat, Overrides, RunConfig};
use error::Result;

#[derive(Debug, Parser)]
#[command(name = "pgdm", version, about = "Pattern-guided diffusion forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write its manifest.
    Generate,
    /// Copy CSV sequences (one file per sequence) into the data directory.
    Ingest {
        /// CSV files or directories; replaces `ingest.inputs` from the config.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Fit archetypes on the training split.
    FitPatterns {
        /// Also write an elbow report for p = 1..=P_MAX.
        #[arg(long, value_name = "P_MAX")]
        elbow: Option<usize>,
    },
    /// Train the archetype-space pattern predictor.
    TrainGuidance,
    /// Train the conditional noise predictor.
    TrainDiffusion,
    /// Sample forecasts for the evaluation windows.
    Forecast {
        #[arg(long, value_enum, default_value = "json")]
        format: ForecastFormat,
        /// Output path; defaults to the reports directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metrics for the unguided baseline and every swept guidance scale.
    Evaluate,
    /// Check the uncertainty bounds on the fitted models.
    Certify,
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = RunConfig::load(&cli.overrides)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Ingest { inputs } => {
            if !inputs.is_empty() {
                cfg.ingest.inputs = inputs;
                cfg.validate()?;
            }
            commands::cmd_ingest(&cfg)
        }
        Command::FitPatterns { elbow } => {
            if let Some(p_max) = elbow {
                cfg.elbow.p_max = p_max;
                cfg.validate()?;
            }
            commands::cmd_fit_patterns(&cfg)
        }
        Command::TrainGuidance => commands::cmd_train_guidance(&cfg),
        Command::TrainDiffusion => commands::cmd_train_diffusion(&cfg),
        Command::Forecast { format, output } => commands::cmd_forecast(&cfg, format, output),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Certify => commands::cmd_certify(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PGDM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
