//! `mitokit` — operator entry point for the dual-track mitosis pipeline.
//!
//! Subcommands cover the full loop: `synth` (deterministic toy data),
//! `split` (leakage-free fold plans), `train` (one fold or all), `infer`
//! (checkpoint-ensemble predictions, optionally test-time augmented),
//! `eval` (scores against a manifest), and `report` (render saved metrics).
//!
//! Exit codes: 0 success, 2 usage or input validation, 3 runtime failure.

mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};
use commands::CliError;

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let result = match parsed.command {
        Command::Synth(args) => commands::synth(args),
        Command::Split(args) => commands::split(args),
        Command::Train(args) => commands::train(args),
        Command::Infer(args) => commands::infer(args),
        Command::Eval(args) => commands::eval(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
