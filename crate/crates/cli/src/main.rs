//! `soh`: simulate, train, sweep and forecast battery degradation models.

mod commands;
mod dataset;
mod error;
mod models;
mod settings;
mod svg;
mod sweep;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::CliResult;
use crate::settings::{Flags, Settings};

#[derive(Debug, Parser)]
#[command(name = "soh", version, about = "Battery state-of-health simulation, hybrid and neural ODE training")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate the physics model and write trajectory.csv and trajectory.svg.
    Simulate,
    /// Write noisy synthetic observations and their ground truth.
    Generate,
    /// Train a hybrid (ude) or neural ODE (node) model.
    Train,
    /// Train every cell of the timespan x optimizer grid.
    Sweep,
    /// Forecast from a checkpoint beyond its training window.
    Forecast,
    /// Compare the learned time factor with t^-1/2.
    #[command(name = "compare-nn1")]
    CompareNn1,
    /// Score a checkpoint on the training and test data.
    Eval,
}

fn run(cli: &Cli) -> CliResult<()> {
    let settings = Settings::resolve(&cli.flags)?;
    match cli.command {
        Command::Simulate => commands::simulate_cmd(&settings),
        Command::Generate => commands::generate_cmd(&settings),
        Command::Train => commands::train_cmd(&settings),
        Command::Sweep => sweep::sweep_cmd(&settings),
        Command::Forecast => commands::forecast_cmd(&settings),
        Command::CompareNn1 => commands::compare_nn1_cmd(&settings),
        Command::Eval => commands::eval_cmd(&settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
