//! Experiment harness around gpc-core: generate sequences, train models,
//! evaluate rollouts, sweep sampling strides, score policies, and self-check
//! gradients. Configuration comes from one JSON file per run; numeric
//! results go to CSV (optionally with a simple SVG plot alongside).
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 I/O
//! error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpc_core::GpcError;

#[derive(Parser)]
#[command(
    name = "gpc",
    version,
    about = "Hierarchical-dynamical sequence models over adaptive sampling strides"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic observation sequence as CSV.
    Generate(RunArgs),
    /// Train a model on a sequence; writes checkpoint.json and metrics.csv.
    Train(RunArgs),
    /// Roll a checkpoint forward and compare against a held-out continuation.
    Eval(RunArgs),
    /// Train one single-replica model per stride and tabulate the errors.
    StrideSweep(RunArgs),
    /// Enumerate and score action policies against a goal; mark the best.
    Plan(RunArgs),
    /// Run the gradient self-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write a simple SVG plot next to each CSV.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional JSON config; only the `seed` field is read.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the optional plot.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write an SVG of per-case error magnitudes.
    #[arg(long)]
    svg: bool,
    /// Corrupt one gradient on purpose; the suite must then fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(&args).map(|()| ExitCode::SUCCESS),
        Command::Train(args) => commands::train(&args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => commands::eval(&args).map(|()| ExitCode::SUCCESS),
        Command::StrideSweep(args) => commands::stride_sweep(&args).map(|()| ExitCode::SUCCESS),
        Command::Plan(args) => commands::plan(&args).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// I/O problems are exit 3; everything else a command can fail on is a
/// configuration problem, exit 2. Check failures (exit 1) never surface as
/// errors.
fn exit_code(e: &GpcError) -> u8 {
    match e {
        GpcError::Io { .. } => 3,
        _ => 2,
    }
}
