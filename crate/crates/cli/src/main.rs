use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gasflow_cli::{execute, Command, RunOptions};

#[derive(Parser)]
#[command(name = "gasflow", version, about = "Robust byproduct-gas scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train quantile forecasters and write supply intervals and metrics.
    Forecast(Args),
    /// Solve the two-stage robust schedule.
    Optimize(Args),
    /// Sweep the budget, ramp-limit scale and minimum output ratio.
    Sweep(Args),
    /// Cost a first-stage schedule over sampled supply trajectories.
    Evaluate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    /// Debug logging (GASFLOW_LOG takes precedence).
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Forecast(a) => (Command::Forecast, a),
        Sub::Optimize(a) => (Command::Optimize, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::Evaluate(a) => (Command::Evaluate, a),
    };
    let default_level = if args.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GASFLOW_LOG", default_level))
        .format_timestamp(None)
        .init();
    let opts = RunOptions {
        seed: args.seed,
        jobs: args.jobs.map(|j| j as usize),
    };
    match execute(command, &args.config, &opts) {
        Ok(report) => {
            if let Some(e) = &report.error {
                eprintln!("gasflow {}: {e}", command.name());
            }
            println!(
                "{} finished with exit code {}; report in {}",
                command.name(),
                report.exit_code,
                report.config.paths.output_dir.join("report.json").display()
            );
            ExitCode::from(report.exit_code as u8)
        }
        Err(e) => {
            eprintln!("gasflow {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
