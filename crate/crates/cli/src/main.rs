//! `rtfm`: synthetic data generation, training, evaluation, the top-k
//! separability simulation, gradient checks and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtfm_core::Error;

use commands::RunFailure;

#[derive(Parser, Debug)]
#[command(name = "rtfm", version, about = "Top-k feature magnitude learning for video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Gen(Common),
    /// Train on `paths.train`, validating on `paths.val` if given.
    Train(Common),
    /// Score `paths.test` with `paths.checkpoint`.
    Eval(Common),
    /// Monte-Carlo top-k separability curve.
    Simulate(Common),
    /// Finite-difference check of the full training loss.
    Gradcheck(Common),
    /// Train and evaluate once per value of `sweep.axis`.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed applied to every section.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<RunFailure>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io { .. } | Error::NonFinite(_)) | None => 2,
        Some(_) => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (common, cmd): (&Common, fn(&config::RunConfig) -> anyhow::Result<()>) = match &cli.command {
        Command::Gen(c) => (c, commands::gen),
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Simulate(c) => (c, commands::simulate),
        Command::Gradcheck(c) => (c, commands::gradcheck),
        Command::Sweep(c) => (c, commands::sweep_cmd),
    };
    let cfg = config::resolve(common.config.as_deref(), &common.sets, common.seed, common.out.as_deref())?;
    let snapshot = config::write_snapshot(&cfg)?;
    println!("config -> {}", snapshot.display());
    cmd(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
