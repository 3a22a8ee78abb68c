//! `scd`: text-only speaker change detection from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, GradcheckArgs, PredictArgs, PrepareArgs, SweepArgs, SynthArgs, TrainArgs};
use config::{resolve, Overrides};

pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError { code: 2, source: e.into() }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        CliError { code: 1, source: e.into() }
    }
}

#[derive(Parser)]
#[command(
    name = "scd",
    version,
    about = "Detect speaker changes between consecutive utterances from text alone"
)]
struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog corpus with a controllable context cue.
    Synth(SynthArgs),
    /// Split a corpus by episode and build the training vocabulary.
    Prepare(PrepareArgs),
    /// Train a model and keep the checkpoint with the best validation F1.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split and emit the metrics report.
    Eval(EvalArgs),
    /// Write per-boundary change probabilities for transcripts as TSV.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Train several models or context sizes and print a comparison table.
    Sweep(SweepArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Synth(args) => {
            let config = resolve(config_path, &Overrides::default()).map_err(CliError::usage)?;
            commands::synth(&args, config)
        }
        Command::Prepare(args) => {
            let config = resolve(config_path, &Overrides::default()).map_err(CliError::usage)?;
            commands::prepare(&args, config)
        }
        Command::Train(args) => {
            let config = resolve(config_path, &args.overrides).map_err(CliError::usage)?;
            commands::train(&args, config)
        }
        Command::Eval(args) => {
            let config = resolve(config_path, &Overrides::default()).map_err(CliError::usage)?;
            commands::eval(&args, config)
        }
        Command::Predict(args) => {
            let config = resolve(config_path, &Overrides::default()).map_err(CliError::usage)?;
            commands::predict(&args, config)
        }
        Command::Gradcheck(args) => commands::gradcheck_cmd(&args),
        Command::Sweep(args) => {
            let config = resolve(config_path, &args.overrides).map_err(CliError::usage)?;
            commands::sweep(&args, config)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
