use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rte_sim::config::{parse_seed, Experiment, RunConfig};
use rte_sim::{run, validate, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "rte-sim", version, about = "Simulate random time change equations and measure strong errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one trajectory per solver variant plus the reference path.
    Simulate(Common),
    /// Estimate strong errors on coupled paths and fit convergence orders.
    Converge(Common),
    /// Sample one-step local errors started from the exact solution.
    LocalError(Common),
    /// Martingale and hook diagnostics on the exact solution.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Master seed, decimal or 0x-prefixed hex. Overrides RTE_SIM_SEED and the config.
    #[arg(long, value_parser = seed_arg)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Leave the wall-clock time out of meta.json.
    #[arg(long)]
    no_timestamp: bool,
    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn seed_arg(s: &str) -> Result<u64, String> {
    parse_seed(s).ok_or_else(|| format!("`{s}` is not a 64-bit unsigned integer"))
}

fn execute(experiment: Experiment, args: Common) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        threads: args.threads,
        timestamp: !args.no_timestamp,
        output: args.output,
        ..RunOptions::from_env()
    };
    for f in validate(&config, experiment) {
        eprintln!("{f}");
    }
    let summary = run(&config, experiment, &opts)?;
    println!(
        "{experiment}: wrote {} files to {} (seed {}, config {})",
        summary.files.len(),
        summary.output.display(),
        summary.seed,
        &summary.config_hash[..12]
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (experiment, args) = match cli.command {
        Command::Simulate(a) => (Experiment::Simulate, a),
        Command::Converge(a) => (Experiment::Converge, a),
        Command::LocalError(a) => (Experiment::LocalError, a),
        Command::Diagnose(a) => (Experiment::Diagnose, a),
    };
    match execute(experiment, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
