//! File formats, configuration and the command-line front end for
//! `crossre-core`.
//!
//! Exit status: 0 on success, 1 on numerical or output failures, 2 on usage
//! errors such as unknown columns, malformed CSV values or bad flags.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod format;

use std::ffi::OsString;

use clap::Parser;
use serde::Serialize;

pub use cli::{Cli, Command};
pub use error::{CliError, Result};

use config::FileConfig;

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads.or(file.threads) {
        if t == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => commands::run_simulate(a, &file),
        Command::Fit(a) => commands::run_fit(a, &file),
        Command::Predict(a) => commands::run_predict(a, &file),
        Command::BenchPrecond(a) => commands::run_bench(a, &file),
        Command::Spectrum(a) => commands::run_spectrum(a, &file),
    }
}

#[derive(Serialize)]
struct FailureReport<'a> {
    error: String,
    kind: &'a str,
    exit_code: i32,
}

/// Parses `args`, runs the command and returns the process exit status.
/// Errors go to stderr: usage errors as plain text, numerical failures as
/// JSON diagnostics.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                _ => eprint!(
                    "{}",
                    format::to_json(&FailureReport {
                        error: e.to_string(),
                        kind: if matches!(e, CliError::Numerical(_)) { "numerical" } else { "io" },
                        exit_code: code,
                    })
                ),
            }
            code
        }
    }
}
