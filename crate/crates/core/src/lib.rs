//! Tuning-free prompt optimization for small multimodal models.
//!
//! The engine improves a task prompt in two stages without touching model
//! weights:
//!
//! 1. **Strategy search with reward memory** ([`search`], [`memory`]) — an
//!    epsilon-greedy search over ordered combinations of prompt strategies.
//!    Rewards (accuracy on a labelled dataset) are banked in a persistent
//!    memory module so later runs on similar task/model pairs can start warm
//!    from a smoothed prior instead of re-exploring from scratch.
//! 2. **Self-reflective refinement** ([`refine`]) — an iterative loop that
//!    evaluates the current prompt, summarizes the error distribution and a
//!    handful of representative failures, asks a strong optimizer model to
//!    diagnose the errors and rewrite the prompt, and keeps the best version
//!    seen.
//!
//! Supporting modules: [`task`] (tasks, samples, datasets, splits),
//! [`strategy`] (the strategy pool and prompt composition), [`backend`]
//! (HTTP and simulated model backends plus request tracing), [`eval`]
//! (scoring and error distributions), and [`simbench`] (synthetic reward
//! landscapes for offline benchmarking of the search stage).

pub mod backend;
pub mod eval;
pub mod memory;
pub mod refine;
pub mod search;
pub mod simbench;
pub mod strategy;
pub mod task;

pub use backend::{
    BackendError, BackendKind, ChatMessage, ChatRole, CompletionRequest, CompletionResult,
    InferenceOutcome, ModelBackend, ModelHandle, ModelRef, ModelRole, TokenUsage,
};
pub use eval::{ErrorDistribution, EvalError, EvalResult, SampleRecord, UNPARSED};
pub use memory::{ActionStats, MemoryError, MemoryKey, MemoryModule, SimilarityProvider};
pub use refine::{OptimizationRun, RefineConfig, RefineError, RefineSession, StopReason};
pub use search::{ChosenBy, SearchConfig, SearchError, SearchSession, SearchStep, SearchTrace};
pub use strategy::{
    PromptCandidate, Strategy, StrategyCombo, StrategyError, StrategyId, StrategyMode, StrategyPool,
};
pub use task::{DataError, Dataset, MediaKind, MediaRef, Sample, SplitTag, Task};
