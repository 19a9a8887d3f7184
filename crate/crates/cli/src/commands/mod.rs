//! Subcommand implementations.

pub mod bench;
pub mod evaluate;
pub mod memory;
pub mod optimize;

pub use bench::{cmd_bench, BenchArgs, BenchSpec};
pub use evaluate::{cmd_evaluate, EvaluateArgs};
pub use memory::{cmd_memory, MemoryAction, MemoryArgs};
pub use optimize::{cmd_optimize, OptimizeArgs, OptimizeOutcome, RunReport};
