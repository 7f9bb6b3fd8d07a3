use std::process::ExitCode;

use clap::Parser;
use rethink_lab::config::extract_overrides;
use rethink_lab::error::CliError;
use rethink_lab::{run, Cli};

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            let e = CliError::Config(e);
            eprintln!("error: {e}");
            return e.to_exit_code();
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.to_exit_code()
        }
    }
}
