use std::process::ExitCode;

use clap::Parser;
use mpq_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.complete {
                ExitCode::SUCCESS
            } else {
                eprintln!("mpq {}: some stages failed; see the report", cli.command.name());
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("mpq {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
