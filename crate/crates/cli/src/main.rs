use clap::Parser;
use qflow_cli::{run, Cli};
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: assertions failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
