//! Command-line front end: simulate, train, restore, stream, eval and inspect.

mod config;
mod error;
mod eval;
mod inspect;
mod restore;
mod simulate;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::Result;

/// Speech restoration at arbitrary input and output sample rates.
///
/// Exit codes: 0 success, 2 usage or invalid config, 3 missing or unusable
/// data, 4 non-finite values during training or inference.
#[derive(Debug, Parser)]
#[command(name = "tfrestore", version)]
struct Cli {
    /// Seed for every random choice; the same seed gives the same outputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulate and eval.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Simulate(simulate::SimulateArgs),
    Train(train::TrainArgs),
    Restore(restore::RestoreArgs),
    Stream(restore::StreamArgs),
    Eval(eval::EvalArgs),
    Inspect(inspect::InspectArgs),
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate::run(a, cli.seed.unwrap_or(0), cli.jobs),
        Command::Train(a) => train::run(a, cli.seed),
        Command::Restore(a) => restore::run(a),
        Command::Stream(a) => restore::run_stream(a),
        Command::Eval(a) => eval::run(a, cli.jobs),
        Command::Inspect(a) => inspect::run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
