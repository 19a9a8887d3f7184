//! The `optimize` command: strategy search with reward memory, then
//! reflective refinement, with all artifacts written to an output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use promptsmith_core::backend::{ModelRole, TraceLog};
use promptsmith_core::eval::evaluate_prompt;
use promptsmith_core::memory::MemoryModule;
use promptsmith_core::refine::{self, RefineSession, ReflectionTemplates, StopReason};
use promptsmith_core::search::{self, SearchMode, SearchTrace};
use promptsmith_core::strategy::{compose_combo, PromptCandidate, StrategyPool};
use promptsmith_core::task::{load_dataset, load_task, split_dataset};
use promptsmith_core::{MemoryKey, OptimizationRun, SearchSession};

use crate::config::{default_memory_path, RunConfig};
use crate::output::write_atomic;

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the reward-memory file.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Output directory for run artifacts (default: promptsmith-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Relative artifact paths inside the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifacts {
    pub search_trace: String,
    pub eso_run: String,
    pub trace_log: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Artifacts {
            search_trace: "search_trace.jsonl".into(),
            eso_run: "eso_run.json".into(),
            trace_log: "trace_log.jsonl".into(),
        }
    }
}

/// The run summary written to `run_report.json`. Everything except
/// `wall_time_ms` is a pure function of config, seed, and memory state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub task_id: String,
    pub inference_model: String,
    pub optimizer_model: String,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub initial_prompt: String,
    pub baseline_accuracy: f64,
    pub search_mode: String,
    pub search_evaluations: usize,
    pub search_best_combo: Vec<String>,
    pub search_best_reward: f64,
    pub refine_iterations: usize,
    pub refine_rewrites: u32,
    pub refine_stop: StopReason,
    pub best_prompt: String,
    pub best_accuracy: f64,
    pub improvement_over_baseline: f64,
    pub total_prompt_evaluations: usize,
    pub artifacts: Artifacts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Excluded from any reproducibility comparison.
    pub wall_time_ms: u64,
}

pub struct OptimizeOutcome {
    pub report: RunReport,
    pub out_dir: PathBuf,
    /// True when the refinement loop stopped with a failure; the command
    /// exits non-zero but all artifacts are still written.
    pub failed: bool,
}

struct StageResults {
    task_id: String,
    train_samples: usize,
    validation_samples: usize,
    initial_prompt: String,
    baseline_accuracy: f64,
    search: SearchTrace,
    run: OptimizationRun,
    evaluations: usize,
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<OptimizeOutcome> {
    let started = Instant::now();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(memory) = &args.memory {
        config.memory_file = Some(memory.clone());
    }
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("promptsmith-out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;

    match run_stages(&config, &out_dir) {
        Ok(results) => {
            let failed = matches!(results.run.stopped_reason, StopReason::Failed { .. });
            let report = build_report(
                &config,
                results,
                failed,
                started.elapsed().as_millis() as u64,
            );
            write_report(&out_dir, &report)?;
            Ok(OptimizeOutcome {
                report,
                out_dir,
                failed,
            })
        }
        Err(err) => {
            // Leave behind a partial report so a crashed run is diagnosable
            // from its output directory alone.
            let report = error_report(&config, &err, started.elapsed().as_millis() as u64);
            let _ = write_report(&out_dir, &report);
            Err(err)
        }
    }
}

fn run_stages(config: &RunConfig, out_dir: &Path) -> Result<StageResults> {
    let task = load_task(&config.task_file)
        .with_context(|| format!("loading task {}", config.task_file.display()))?;
    let dataset = load_dataset(&config.data_file, &task)
        .with_context(|| format!("loading dataset {}", config.data_file.display()))?;
    let (train, validation) = split_dataset(
        &dataset,
        (
            config.split.train_fraction,
            config.split.validation_fraction,
        ),
        config.seed,
    )?;

    let trace_log = TraceLog::to_file(&out_dir.join("trace_log.jsonl"))?;
    let inference =
        config
            .inference_model
            .build_handle(ModelRole::Inference, config.seed, Some(&trace_log))?;
    let optimizer =
        config
            .optimizer_model
            .build_handle(ModelRole::Optimizer, config.seed, Some(&trace_log))?;

    let custom_pool = config
        .strategy_file
        .as_deref()
        .map(StrategyPool::from_file)
        .transpose()?;
    let pool: &StrategyPool = match &custom_pool {
        Some(p) => p,
        None => StrategyPool::builtin(),
    };

    let memory_path = config
        .memory_file
        .clone()
        .unwrap_or_else(default_memory_path);
    let mut memory = MemoryModule::load_or_default(&memory_path)?;
    let provider = config.similarity.provider();
    let key = MemoryKey::new(
        task.task_id.clone(),
        config.inference_model.model_id.clone(),
        task.description.clone(),
    );

    let mut evaluations = 0usize;

    // Reference point: the unmodified prompt on the validation split.
    let baseline = evaluate_prompt(
        &PromptCandidate::base(&task.initial_prompt),
        &validation,
        &task,
        &inference,
    )?;
    evaluations += 1;

    // Stage one: strategy search on the train split.
    let search_config = config.search.to_config(config.seed);
    let session = SearchSession {
        task: &task,
        data: &train,
        pool,
        inference: &inference,
        optimizer: Some(&optimizer),
        config: &search_config,
        key,
    };
    let trace = search::run_search(&session, &mut memory, &provider, &mut |_| {
        evaluations += 1;
    })?;
    let mut lines = String::new();
    for step in &trace.steps {
        lines.push_str(&serde_json::to_string(step)?);
        lines.push('\n');
    }
    write_atomic(&out_dir.join("search_trace.jsonl"), lines.as_bytes())?;
    memory.save_with_retry(&memory_path, 3)?;

    // Stage two: reflective refinement on the validation split, starting
    // from the search winner.
    let start = compose_combo(
        pool,
        &task.initial_prompt,
        &trace.best.combo,
        Some(&optimizer),
    )?;
    let refine_config = config.refine.to_config();
    let refine_session = RefineSession {
        task: &task,
        data: &validation,
        inference: &inference,
        optimizer: &optimizer,
        config: &refine_config,
        templates: ReflectionTemplates::builtin(),
    };
    let run = refine::run_refinement(&refine_session, &start, &mut |_| {
        evaluations += 1;
    })?;
    write_atomic(
        &out_dir.join("eso_run.json"),
        format!("{}\n", serde_json::to_string_pretty(&run)?).as_bytes(),
    )?;

    Ok(StageResults {
        task_id: task.task_id,
        train_samples: train.samples.len(),
        validation_samples: validation.samples.len(),
        initial_prompt: task.initial_prompt,
        baseline_accuracy: baseline.accuracy,
        search: trace,
        run,
        evaluations,
    })
}

fn mode_name(mode: SearchMode) -> &'static str {
    match mode {
        SearchMode::Cold => "cold",
        SearchMode::Warm => "warm",
    }
}

fn build_report(
    config: &RunConfig,
    results: StageResults,
    failed: bool,
    wall_time_ms: u64,
) -> RunReport {
    let error = match &results.run.stopped_reason {
        StopReason::Failed { message } => Some(message.clone()),
        _ => None,
    };
    RunReport {
        status: if failed { "failed" } else { "completed" }.into(),
        task_id: results.task_id,
        inference_model: config.inference_model.model_id.clone(),
        optimizer_model: config.optimizer_model.model_id.clone(),
        seed: config.seed,
        train_samples: results.train_samples,
        validation_samples: results.validation_samples,
        initial_prompt: results.initial_prompt,
        baseline_accuracy: results.baseline_accuracy,
        search_mode: mode_name(results.search.mode).into(),
        search_evaluations: results.search.evaluations_used,
        search_best_combo: results
            .search
            .best
            .combo
            .ids()
            .iter()
            .map(|id| id.as_str().to_string())
            .collect(),
        search_best_reward: results.search.best.reward,
        refine_iterations: results.run.iterations.len(),
        refine_rewrites: results.run.rewrite_calls,
        refine_stop: results.run.stopped_reason.clone(),
        best_prompt: results.run.best.text.clone(),
        best_accuracy: results.run.best_accuracy,
        improvement_over_baseline: results.run.best_accuracy - results.baseline_accuracy,
        total_prompt_evaluations: results.evaluations,
        artifacts: Artifacts::default(),
        error,
        wall_time_ms,
    }
}

fn error_report(config: &RunConfig, err: &anyhow::Error, wall_time_ms: u64) -> RunReport {
    RunReport {
        status: "error".into(),
        task_id: String::new(),
        inference_model: config.inference_model.model_id.clone(),
        optimizer_model: config.optimizer_model.model_id.clone(),
        seed: config.seed,
        train_samples: 0,
        validation_samples: 0,
        initial_prompt: String::new(),
        baseline_accuracy: 0.0,
        search_mode: String::new(),
        search_evaluations: 0,
        search_best_combo: Vec::new(),
        search_best_reward: 0.0,
        refine_iterations: 0,
        refine_rewrites: 0,
        refine_stop: StopReason::Failed {
            message: "run aborted before completion".into(),
        },
        best_prompt: String::new(),
        best_accuracy: 0.0,
        improvement_over_baseline: 0.0,
        total_prompt_evaluations: 0,
        artifacts: Artifacts::default(),
        error: Some(format!("{err:#}")),
        wall_time_ms,
    }
}

fn write_report(out_dir: &Path, report: &RunReport) -> Result<()> {
    write_atomic(
        &out_dir.join("run_report.json"),
        format!("{}\n", serde_json::to_string_pretty(report)?).as_bytes(),
    )
}
