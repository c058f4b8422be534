//! `msafeb` command-line interface.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msafeb_core::Error;

#[derive(Debug, Parser)]
#[command(name = "msafeb", version, about = "Multi-scale attention feature extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic grating dataset as PPM files.
    Synth(commands::SynthArgs),
    /// Train and evaluate over stratified random splits.
    Train(commands::TrainArgs),
    /// Train with and without the block under identical seeds.
    Ablate(commands::TrainArgs),
    /// Print the analytic parameter breakdown of a block configuration.
    Params(commands::ParamsArgs),
    /// Write a Grad-CAM overlay for one image.
    Gradcam(commands::GradcamArgs),
    /// Welch's two-sample t-test on two files of accuracies.
    Ttest(commands::TtestArgs),
}

/// Exit codes: 1 usage, 2 data/format, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Unsupported(_) => CliError::Usage(msg),
            Error::NonFinite(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, false),
        Command::Ablate(a) => commands::train(a, true),
        Command::Params(a) => commands::params(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Ttest(a) => commands::ttest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
