//! `sclvm`: fit, classify, sample and inspect shared/private latent variable
//! models from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ClassifyArgs, ExportArgs, FitArgs, MetricsArgs, SampleArgs, SynthArgs};

#[derive(Parser, Debug)]
#[command(name = "sclvm", version, about = "Shared/private latent variable models for imbalanced data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a labeled CSV (or SCLD binary) dataset.
    Fit(FitArgs),
    /// Classify every row of a CSV by per-category bound comparison.
    Classify(ClassifyArgs),
    /// Precision, recall and F1 of a predictions file against the truth.
    Metrics(MetricsArgs),
    /// Draw samples for one category in data units.
    Sample(SampleArgs),
    /// Write the training posterior means and variances with labels.
    ExportLatent(ExportArgs),
    /// Generate an imbalanced synthetic two-category dataset.
    Synth(SynthArgs),
}

/// A failed run with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<sclvm::SclvmError> for Failure {
    fn from(e: sclvm::SclvmError) -> Self {
        use sclvm::SclvmError::*;
        let code = match e {
            Numerical(_) | Inference { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::data(e.to_string())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SCLVM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::usage(format!("SCLVM_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = configure_threads().and_then(|_| match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Classify(a) => commands::classify(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Sample(a) => commands::sample(a),
        Command::ExportLatent(a) => commands::export_latent(a),
        Command::Synth(a) => commands::synth(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
