//! The `evaluate` command: score one prompt file against a labelled
//! dataset using an HTTP endpoint or the simulated backend.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use promptsmith_core::backend::ModelRole;
use promptsmith_core::eval::evaluate_prompt;
use promptsmith_core::strategy::PromptCandidate;
use promptsmith_core::task::{load_dataset, load_task};

use crate::config::ModelSpec;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Task definition file (JSON).
    #[arg(long)]
    pub task: PathBuf,
    /// Dataset file (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Plain-text file holding the prompt to score.
    #[arg(long)]
    pub prompt: PathBuf,
    /// OpenAI-compatible endpoint URL, or "sim" for the simulated backend.
    #[arg(long = "model-endpoint")]
    pub model_endpoint: String,
    /// Emit the full evaluation result as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,
    /// Response script for the simulated backend (defaults to a script
    /// that answers every sample correctly).
    #[arg(long)]
    pub sim_script: Option<PathBuf>,
    /// Model identifier recorded in the results.
    #[arg(long, default_value = "inference-model")]
    pub model_id: String,
    /// Request seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let task =
        load_task(&args.task).with_context(|| format!("loading task {}", args.task.display()))?;
    let dataset = load_dataset(&args.data, &task)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let prompt_text = std::fs::read_to_string(&args.prompt)
        .with_context(|| format!("reading prompt {}", args.prompt.display()))?;
    let prompt_text = prompt_text.trim_end();

    let spec = ModelSpec {
        model_id: args.model_id.clone(),
        endpoint: args.model_endpoint.clone(),
        temperature: None,
        max_output_tokens: None,
        parallelism_limit: None,
        template_role: None,
        script_file: args.sim_script.clone(),
        sim_seed: None,
    };
    let handle = spec.build_handle(ModelRole::Inference, args.seed, None)?;

    let result = evaluate_prompt(
        &PromptCandidate::base(prompt_text),
        &dataset,
        &task,
        &handle,
    )?;

    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
    } else {
        let correct = result.correct();
        writeln!(
            out,
            "task: {}  samples: {}",
            task.task_id,
            result.records.len()
        )?;
        writeln!(
            out,
            "accuracy: {:.4} ({}/{})",
            result.accuracy,
            correct,
            result.records.len()
        )?;
        if result.error_distribution.is_empty() {
            writeln!(out, "errors: none")?;
        } else {
            writeln!(out, "errors:")?;
            writeln!(out, "{}", result.error_distribution.render())?;
        }
    }
    Ok(())
}
