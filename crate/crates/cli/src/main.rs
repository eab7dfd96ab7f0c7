//! `epgpc`: train, evaluate and apply multi-class GP classifiers.

mod commands;
mod manifest;
mod options;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const CHECK_FAILED: u8 = 5;
}

/// Bad flags, config or combination of options.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Some oracle checks did not pass.
#[derive(Debug)]
pub struct ChecksFailed(pub usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

#[derive(Parser)]
#[command(name = "epgpc", version, about = "Multi-class Gaussian process classification with expectation propagation")]
struct Cli {
    /// Write the run manifest here (train, synth and predict default to
    /// `<output>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a snapshot, a trace and a manifest.
    Train(commands::TrainArgs),
    /// Error rate and mean negative log-likelihood of a snapshot on labelled data.
    Eval(commands::EvalArgs),
    /// Per-row class probabilities and the predicted class, as CSV.
    Predict(commands::PredictArgs),
    /// Generate the synthetic three-class problem.
    Synth(commands::SynthArgs),
    /// Run the oracle suite and report pass/fail per check.
    Check(commands::CheckArgs),
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EPGPC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("EPGPC_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(UsageError("EPGPC_THREADS must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if cause.is::<ChecksFailed>() {
            return exit::CHECK_FAILED;
        }
        if let Some(err) = cause.downcast_ref::<epgpc::Error>() {
            use epgpc::Error::*;
            return match err {
                Config(_) | InvalidIndex(_) => exit::USAGE,
                Dimension(_) | Data(_) | Snapshot(_) | Io(_) | Json(_) => exit::DATA,
                NotPositiveDefinite { .. } | CavityInvalid | Reconstruction { .. } => exit::NUMERICAL,
            };
        }
        if cause.is::<std::io::Error>() {
            return exit::DATA;
        }
    }
    exit::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Train(a) => commands::train(a, cli.manifest),
        Command::Eval(a) => commands::eval(a, cli.manifest),
        Command::Predict(a) => commands::predict(a, cli.manifest),
        Command::Synth(a) => commands::synth(a, cli.manifest),
        Command::Check(a) => commands::check(a, cli.manifest),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
