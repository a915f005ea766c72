//! Command-line driver: flag and config-file handling, experiment commands
//! and results tables.

pub mod config;
pub mod run;
pub mod table;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

pub use config::{Cli, Command, Flags};
pub use run::{exit_code, run, Outcome};
pub use table::{render_table, Table};

/// Parses `args` (including the program name), runs the command and reports
/// to stdout and stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", out.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
