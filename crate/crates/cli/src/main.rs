//! `stssl`: synthesize datasets, train, evaluate, sweep and plot.

mod config;
mod eval;
mod plot;
mod sweep;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Anything that fails after the arguments were accepted; exit code 2.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<stssl_core::Error> for CliError {
    fn from(e: stssl_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "stssl", version, about = "Semi-supervised video action detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    Synth(synth::SynthArgs),
    /// Train one model.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint or a prediction dump.
    Eval(eval::EvalArgs),
    /// Train and evaluate over labeled fractions or unlabeled amounts.
    Sweep(sweep::SweepArgs),
    /// Render sweep reports as line plots.
    Plot(plot::PlotArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
