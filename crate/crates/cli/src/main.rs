use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cts_cli::Cli::parse();
    match cts_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
