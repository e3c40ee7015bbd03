//! `contam`: contamination-bias diagnostics from the command line.
//!
//! Exit codes: 0 on success, 2 for invalid input, 3 for numerical failures.

mod args;
mod commands;
mod report;
mod table;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, OutputArgs};
use commands::Run;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// A run that did not succeed, with its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
    /// Partial output worth emitting anyway (a failed `--check`).
    pub run: Option<Box<Run>>,
}

impl Failure {
    pub fn numerical(message: String) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message,
            run: None,
        }
    }

    pub fn check_failed(run: Run) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: "closed forms disagree with the enumerated regression".into(),
            run: Some(Box::new(run)),
        }
    }
}

impl From<contam_core::Error> for Failure {
    fn from(e: contam_core::Error) -> Self {
        Self {
            code: if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_NUMERICAL
            },
            message: e.to_string(),
            run: None,
        }
    }
}

fn emit(run: &Run, out: &OutputArgs) -> Result<(), Failure> {
    print!("{}", run.text);
    for w in &run.report.warnings {
        eprintln!("warning: {w}");
    }
    commands::write_outputs(run, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command: Vec<String> = std::env::args().skip(1).collect();
    let (result, out) = match &cli.command {
        Command::Decompose(a) => (commands::decompose(a, command), &a.output),
        Command::Estimate(a) => (commands::estimate_cmd(a, command), &a.output),
        Command::Oracle(a) => (commands::oracle(a, command), &a.output),
        Command::Simulate(a) => (commands::simulate_cmd(a, command), &a.output),
    };
    let outcome = result.and_then(|run| emit(&run, out));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if let Some(run) = &failure.run {
                if let Err(e) = emit(run, out) {
                    eprintln!("error: {}", e.message);
                }
            }
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
