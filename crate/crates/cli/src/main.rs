//! `ptdiff`: command-line driver for the illusion sampler.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
//! usage, 3 backend unreachable or failing, 4 I/O or malformed input file.

mod args;
mod commands;
mod manifest;
mod staging;

use std::process::ExitCode;

use clap::Parser;
use ptdiff_core::Error;

use args::{Cli, Command};

/// Usage error detected by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::Parameter { .. } | Error::Condition(_) => 2,
                Error::Backend(_) => 3,
                Error::Io(_) | Error::Data(_) => 4,
                Error::Interrupted { .. } => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Invert(run) => commands::invert(run),
        Command::Generate(run) => commands::generate(run, None),
        Command::Ablate { mode, run } => commands::generate(run, Some(*mode)),
        Command::Sweep { step, seeds, run } => commands::sweep(run, *step, *seeds),
        Command::ScheduleDump(args) => commands::schedule_dump(args),
        Command::ProtocolEcho(args) => commands::protocol_echo(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
