//! Command-line orchestration of the forecasting pipeline: synthetic data,
//! ingestion, features, training, backtesting, the experiment grid, drift
//! monitoring and registry reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::ffi::OsString;

use clap::Parser;

pub use commands::Cli;
pub use error::{CliError, Result};

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
