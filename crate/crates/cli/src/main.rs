//! `siftpose` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 unreadable or malformed input,
//! 4 degenerate sample or no model found.

mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command, GenerateCommand};
use crate::error::CliError;

/// Environment variable holding the worker count of the parallel commands.
const THREADS_VAR: &str = "SIFTPOSE_THREADS";

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Ransac(a) => commands::ransac(&a),
        Command::BenchSynthetic(a) => commands::bench_synthetic(&a),
        Command::BenchDataset(a) => commands::bench_dataset(&a),
        Command::Generate(GenerateCommand::Sample(a)) => commands::generate_sample(&a),
        Command::Generate(GenerateCommand::Dataset(a)) => commands::generate_dataset(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
