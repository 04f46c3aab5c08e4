//! Command-line front end. Each subcommand reads interchange files, runs one
//! pipeline stage and writes its output next to a run manifest.

pub mod commands;
pub mod profile;

use std::ffi::OsString;

use clap::Parser;

pub use commands::Cli;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(summary) => {
            if summary.warnings > 0 {
                eprintln!("{} warning(s)", summary.warnings);
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
