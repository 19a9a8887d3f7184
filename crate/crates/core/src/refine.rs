//! Iterative self-reflective prompt refinement.
//!
//! Starting from the search stage's best prompt, each iteration evaluates
//! the current prompt, summarizes its error distribution and a small set of
//! representative failures, asks the optimizer model to diagnose the error
//! causes (as structured JSON), then asks it to rewrite the prompt given
//! the full history of earlier rounds. The best prompt ever seen — by
//! accuracy, earliest on ties — is kept, so a refinement that regresses
//! never loses ground.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatMessage, ModelHandle};
use crate::eval::{self, EvalError, EvalResult};
use crate::strategy::{self, PromptCandidate};
use crate::task::{Dataset, Task};

/// Knobs for the refinement loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Maximum optimizer rewrites (so up to `max_iterations + 1` prompt
    /// evaluations including the initial one).
    pub max_iterations: usize,
    /// How many representative failures are quoted to the optimizer.
    pub bad_case_count: usize,
    /// Raw-output excerpt length cap per quoted failure, in characters.
    pub excerpt_max_chars: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iterations: 10,
            bad_case_count: 5,
            excerpt_max_chars: 500,
        }
    }
}

/// The two reflection instruction templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectionTemplates {
    /// Error-cause analysis instruction; placeholders `{prompt}`,
    /// `{strategies}`, `{error_distribution}`, `{error_cases}`.
    pub analysis: String,
    /// Rewrite instruction; placeholders `{historical_results}`,
    /// `{prompt}`, `{error_analysis_results}`.
    pub summary: String,
}

static BUILTIN_TEMPLATES: OnceLock<ReflectionTemplates> = OnceLock::new();

impl ReflectionTemplates {
    pub fn builtin() -> &'static ReflectionTemplates {
        BUILTIN_TEMPLATES.get_or_init(|| ReflectionTemplates {
            analysis: include_str!("../resources/error_analysis.txt")
                .trim_end()
                .to_string(),
            summary: include_str!("../resources/error_summary.txt")
                .trim_end()
                .to_string(),
        })
    }
}

/// One representative failure quoted to the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadCase {
    pub sample_id: String,
    pub gold_label: String,
    pub predicted_label: String,
    pub excerpt: String,
}

/// Parsed error diagnosis from the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub error_causes: String,
    pub improvement_methods: String,
}

/// Why the loop ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    PerfectAccuracy,
    NoErrors,
    /// An analysis, rewrite, or evaluation step failed mid-loop; the run so
    /// far is preserved.
    Failed {
        message: String,
    },
}

/// One refinement round: the prompt, how it scored, and (if the loop went
/// on from here) the diagnosis of its errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub prompt: PromptCandidate,
    pub eval: EvalResult,
    pub analysis: Option<ErrorAnalysis>,
    pub bad_cases: Vec<BadCase>,
}

/// The full history and outcome of one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRun {
    pub initial_prompt: PromptCandidate,
    pub iterations: Vec<IterationRecord>,
    /// Index into `iterations` of the kept prompt (highest accuracy,
    /// earliest on ties).
    pub best_index: usize,
    pub best: PromptCandidate,
    pub best_accuracy: f64,
    pub stopped_reason: StopReason,
    pub rewrite_calls: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(
        "could not parse an analysis object after {attempts} attempts; last reply: {last:.120}"
    )]
    AnalysisParse { attempts: u32, last: String },
    #[error("optimizer returned an empty rewrite")]
    EmptyRewrite,
}

/// Finds the first balanced `{...}` block in `text` that parses as a JSON
/// object, tolerating surrounding prose and code fences.
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = text[search_from..].find('{') {
        let start = search_from + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &b) in bytes[start..].iter().enumerate() {
            if escaped {
                escaped = false;
                continue;
            }
            match b {
                b'\\' if in_string => escaped = true,
                b'"' => in_string = !in_string,
                b'{' if !in_string => depth += 1,
                b'}' if !in_string => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i + 1);
                        break;
                    }
                }
                _ => {}
            }
        }
        // An unbalanced brace to the end of the text means no candidate
        // object starts later either.
        let end = end?;
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text[start..end]) {
            if value.is_object() {
                return Some(value);
            }
        }
        search_from = start + 1;
    }
    None
}

fn truncate_chars(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        return s.to_string();
    }
    let cut: String = s.chars().take(max_chars).collect();
    format!("{cut}…")
}

/// Picks up to `config.bad_case_count` wrong answers, walking the error
/// buckets largest-first in round-robin so the selection covers the error
/// distribution instead of dwelling on one failure mode. Within a bucket,
/// records come in dataset order.
pub fn select_bad_cases(eval: &EvalResult, config: &RefineConfig) -> Vec<BadCase> {
    let buckets = eval.error_distribution.by_count_desc();
    let mut per_bucket: Vec<Vec<&crate::eval::SampleRecord>> = buckets
        .iter()
        .map(|(gold, predicted, _)| {
            eval.records
                .iter()
                .filter(|r| {
                    r.score == 0 && r.gold_label == *gold && r.predicted_label == *predicted
                })
                .collect()
        })
        .collect();
    let mut picked = Vec::new();
    let mut cursor = vec![0usize; per_bucket.len()];
    while picked.len() < config.bad_case_count {
        let mut advanced = false;
        for (b, records) in per_bucket.iter_mut().enumerate() {
            if picked.len() >= config.bad_case_count {
                break;
            }
            if cursor[b] < records.len() {
                let r = records[cursor[b]];
                cursor[b] += 1;
                advanced = true;
                picked.push(BadCase {
                    sample_id: r.sample_id.clone(),
                    gold_label: r.gold_label.clone(),
                    predicted_label: r.predicted_label.clone(),
                    excerpt: truncate_chars(&r.raw_output, config.excerpt_max_chars),
                });
            }
        }
        if !advanced {
            break;
        }
    }
    picked
}

fn render_cases(cases: &[BadCase]) -> String {
    if cases.is_empty() {
        return "(no samples selected)".to_string();
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "Case {}:\nsample_id: {}\ngold label: {}\nmodel prediction: {}\nmodel output: {}",
                i + 1,
                c.sample_id,
                c.gold_label,
                c.predicted_label,
                c.excerpt
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_strategies(prompt: &PromptCandidate) -> String {
    if prompt.combo.is_empty() {
        "(none)".to_string()
    } else {
        prompt
            .combo
            .ids()
            .iter()
            .map(|id| id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn render_history(iterations: &[IterationRecord]) -> String {
    iterations
        .iter()
        .map(|rec| {
            format!(
                "Round {}:\nPrompt: {}\nAccuracy: {:.4}\nError distribution:\n{}",
                rec.iteration + 1,
                rec.prompt.text,
                rec.eval.accuracy,
                rec.eval.error_distribution.render()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the optimizer to diagnose the current errors. The reply must
/// contain a JSON object with "Error Causes" and "Improvement Methods";
/// one retry (with an explicit format reminder) is allowed before failing.
pub fn analyze_errors(
    optimizer: &ModelHandle,
    templates: &ReflectionTemplates,
    prompt: &PromptCandidate,
    eval: &EvalResult,
    cases: &[BadCase],
) -> Result<ErrorAnalysis, RefineError> {
    let instruction = templates
        .analysis
        .replace("{prompt}", &prompt.text)
        .replace("{strategies}", &render_strategies(prompt))
        .replace("{error_distribution}", &eval.error_distribution.render())
        .replace("{error_cases}", &render_cases(cases));

    let mut last_reply = String::new();
    for attempt in 0..2 {
        let text = if attempt == 0 {
            instruction.clone()
        } else {
            format!(
                "{instruction}\n\nYour previous reply could not be parsed. Reply with exactly one JSON object in this format: {{\"Error Causes\": \"\", \"Improvement Methods\": \"\"}}"
            )
        };
        let message = ChatMessage::text(optimizer.model.template_role, text);
        let reply = optimizer.complete_text(vec![message])?;
        if let Some(value) = extract_json_object(&reply) {
            let field = |name: &str| -> Option<String> {
                value.get(name).map(|v| match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
            };
            if let (Some(error_causes), Some(improvement_methods)) =
                (field("Error Causes"), field("Improvement Methods"))
            {
                return Ok(ErrorAnalysis {
                    error_causes,
                    improvement_methods,
                });
            }
        }
        last_reply = reply;
    }
    Err(RefineError::AnalysisParse {
        attempts: 2,
        last: last_reply,
    })
}

/// Asks the optimizer for a revised prompt given the round history and the
/// current diagnosis. Returns the cleaned prompt text.
pub fn rewrite_prompt(
    optimizer: &ModelHandle,
    templates: &ReflectionTemplates,
    history: &[IterationRecord],
    current: &PromptCandidate,
    analysis: &ErrorAnalysis,
) -> Result<String, RefineError> {
    let instruction = templates
        .summary
        .replace("{historical_results}", &render_history(history))
        .replace("{prompt}", &current.text)
        .replace(
            "{error_analysis_results}",
            &format!(
                "Error Causes: {}\nImprovement Methods: {}",
                analysis.error_causes, analysis.improvement_methods
            ),
        );
    let message = ChatMessage::text(optimizer.model.template_role, instruction);
    let reply = optimizer.complete_text(vec![message])?;
    let cleaned = strategy::clean_model_prompt(&reply);
    if cleaned.is_empty() {
        return Err(RefineError::EmptyRewrite);
    }
    Ok(cleaned)
}

/// Shared inputs for one refinement run.
pub struct RefineSession<'a> {
    pub task: &'a Task,
    pub data: &'a Dataset,
    pub inference: &'a ModelHandle,
    pub optimizer: &'a ModelHandle,
    pub config: &'a RefineConfig,
    pub templates: &'a ReflectionTemplates,
}

/// Runs the refinement loop to completion.
///
/// The initial evaluation must succeed (there is nothing to preserve
/// without it); any later failure stops the loop with
/// [`StopReason::Failed`] and returns the partial run.
pub fn run_refinement(
    session: &RefineSession,
    initial: &PromptCandidate,
    on_eval: &mut dyn FnMut(&EvalResult),
) -> Result<OptimizationRun, RefineError> {
    let mut start = initial.clone();
    start.eso_iteration = 0;
    let first_eval = eval::evaluate_prompt(&start, session.data, session.task, session.inference)?;
    on_eval(&first_eval);
    let mut iterations = vec![IterationRecord {
        iteration: 0,
        prompt: start,
        eval: first_eval,
        analysis: None,
        bad_cases: Vec::new(),
    }];
    let mut rewrite_calls: u32 = 0;

    let stopped_reason = loop {
        let last = iterations.last().expect("at least the initial record");
        if last.eval.accuracy >= 1.0 {
            break StopReason::PerfectAccuracy;
        }
        if last.eval.error_distribution.is_empty() {
            break StopReason::NoErrors;
        }
        if rewrite_calls as usize >= session.config.max_iterations {
            break StopReason::MaxIterations;
        }

        let cases = select_bad_cases(&last.eval, session.config);
        let analysis = match analyze_errors(
            session.optimizer,
            session.templates,
            &last.prompt,
            &last.eval,
            &cases,
        ) {
            Ok(a) => a,
            Err(e) => {
                break StopReason::Failed {
                    message: e.to_string(),
                }
            }
        };
        {
            let last = iterations.last_mut().expect("non-empty");
            last.analysis = Some(analysis.clone());
            last.bad_cases = cases;
        }

        let last = iterations.last().expect("non-empty");
        let new_text = match rewrite_prompt(
            session.optimizer,
            session.templates,
            &iterations,
            &last.prompt,
            &analysis,
        ) {
            Ok(t) => t,
            Err(e) => {
                break StopReason::Failed {
                    message: e.to_string(),
                }
            }
        };
        rewrite_calls += 1;

        let iteration = iterations.len() as u32;
        let previous = iterations.last().expect("non-empty");
        let mut note = format!("refined(iteration {iteration})");
        if new_text == previous.prompt.text {
            note.push_str(", identical rewrite");
        }
        let next = PromptCandidate {
            text: new_text,
            base_prompt: initial.base_prompt.clone(),
            combo: initial.combo.clone(),
            eso_iteration: iteration,
            lineage_note: if initial.lineage_note.is_empty() {
                note
            } else {
                format!("{} -> {}", initial.lineage_note, note)
            },
        };
        let next_eval =
            match eval::evaluate_prompt(&next, session.data, session.task, session.inference) {
                Ok(e) => e,
                Err(e) => {
                    break StopReason::Failed {
                        message: e.to_string(),
                    }
                }
            };
        on_eval(&next_eval);
        iterations.push(IterationRecord {
            iteration,
            prompt: next,
            eval: next_eval,
            analysis: None,
            bad_cases: Vec::new(),
        });
    };

    let best_index = iterations
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.eval
                .accuracy
                .total_cmp(&b.eval.accuracy)
                // Earliest wins ties: prefer the smaller index.
                .then_with(|| ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("non-empty iterations");
    Ok(OptimizationRun {
        initial_prompt: initial.clone(),
        best: iterations[best_index].prompt.clone(),
        best_accuracy: iterations[best_index].eval.accuracy,
        best_index,
        iterations,
        stopped_reason,
        rewrite_calls,
    })
}
