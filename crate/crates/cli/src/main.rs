//! `calibkit`: generate, featurize, fit and evaluate confidence calibrators.
//!
//! Exit codes: 0 ok, 2 unreadable or invalid input, 3 degenerate data,
//! 4 incompatible model and data, 64 usage error.

mod commands;

use std::process::ExitCode;

use calibkit_core::Error;
use clap::error::ErrorKind;
use clap::Parser;

use commands::Cli;

const EXIT_INPUT: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_INCOMPATIBLE: u8 = 4;
const EXIT_USAGE: u8 = 64;

/// Name of the variable capping worker threads.
const THREADS_ENV: &str = "CALIBKIT_THREADS";

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Degenerate(_) => EXIT_DEGENERATE,
        Error::Incompatible(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_INPUT,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
