mod ablate;
mod datagen;
mod gradcheck;
mod report;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Domain adaptation experiments on synthetic benchmarks.
#[derive(Parser, Debug)]
#[command(name = "ren", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a source/target dataset CSV and its metadata sidecar.
    Datagen(datagen::Args),
    /// Train one run. Options: --config FILE, --data CSV, --out DIR, and
    /// any config key as --KEY VALUE (e.g. --variant ren --seed 7 --steps 500).
    Train(train::Args),
    /// Train every variant for every seed and summarise.
    Ablate(ablate::Args),
    /// Compare analytic loss gradients against central differences.
    Gradcheck(gradcheck::Args),
    /// Summarise a run directory or an ablation directory.
    Report(report::Args),
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen::run(a),
        Command::Train(a) => train::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
