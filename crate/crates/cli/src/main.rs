mod args;
mod commands;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a)?,
        Command::RunMil(a) => commands::run_mil(&a)?,
        Command::RunBaselines(a) => commands::run_baselines(&a)?,
        Command::BruteForce(a) => commands::brute_force(&a)?,
        Command::Gradcheck(a) => return commands::gradcheck(&a),
        Command::Plot(a) => plot::plot(&a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
