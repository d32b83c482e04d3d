use std::process::ExitCode;

use clap::Parser;

mod args;
mod report;
mod run;

use args::{Cli, Command};
use run::Verdict;

/// Exit status when a `--verify` tolerance is missed.
const VERIFY_FAILED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Forward(a) => run::forward(a),
        Command::Backward(a) => run::backward(a),
        Command::Sweep(a) => run::sweep(a),
        Command::Gen(a) => run::gen(a),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => {
            eprintln!("verification failed");
            ExitCode::from(VERIFY_FAILED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
