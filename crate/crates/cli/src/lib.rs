//! Command-line interface for the prompt-optimization engine.
//!
//! Subcommands: `optimize` (the two-stage pipeline), `evaluate` (score one
//! prompt), `bench` (offline search benchmark on synthetic landscapes), and
//! `memory` (inspect the reward memory). Command logic lives in
//! [`commands`] as plain functions so integration tests can drive it
//! in-process.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{
    cmd_bench, cmd_evaluate, cmd_memory, cmd_optimize, BenchArgs, EvaluateArgs, MemoryArgs,
    OptimizeArgs, OptimizeOutcome, RunReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "promptsmith",
    version,
    about = "Tuning-free prompt optimization: strategy search with reward memory, then reflective refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the two-stage optimization pipeline on a task.
    Optimize(OptimizeArgs),
    /// Score one prompt against a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Compare search variants on synthetic reward landscapes.
    Bench(BenchArgs),
    /// Inspect or maintain the reward memory.
    Memory(MemoryArgs),
}

/// Full program: parse arguments, dispatch, map errors to exit status.
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Optimize(args) => {
            let outcome = cmd_optimize(&args)?;
            let r = &outcome.report;
            println!(
                "search: {} ({} evaluations), best combo [{}] reward {:.4}",
                r.search_mode,
                r.search_evaluations,
                r.search_best_combo.join(", "),
                r.search_best_reward
            );
            println!(
                "refinement: {} iterations, {} rewrites, best accuracy {:.4} (baseline {:.4})",
                r.refine_iterations, r.refine_rewrites, r.best_accuracy, r.baseline_accuracy
            );
            println!("artifacts in {}", outcome.out_dir.display());
            if outcome.failed {
                eprintln!("refinement stopped with a failure; see run_report.json");
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Evaluate(args) => {
            cmd_evaluate(&args, &mut stdout)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => {
            cmd_bench(&args, &mut stdout)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Memory(args) => {
            cmd_memory(&args, &mut stdout)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
