use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod evaluate;
mod fit;
mod manifest;
mod simulate;
mod subsample;

#[derive(Parser)]
#[command(name = "svyfosr", version, about = "Survey-weighted function-on-scalar regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit coefficient functions with pointwise and joint bands.
    Fit(fit::FitArgs),
    /// Generate a superpopulation and draw two-stage samples from it.
    Simulate(simulate::SimulateArgs),
    /// Informatively subsample a dataset treated as the population.
    Subsample(subsample::SubsampleArgs),
    /// Score band files against truth files and aggregate.
    Evaluate(evaluate::EvaluateArgs),
}

/// 2 for bad input, 3 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<svyfosr::Error>() {
        Some(e) if e.is_validation() => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => fit::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Subsample(args) => subsample::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
