//! Scoring model outputs against gold labels and summarizing the mistakes.
//!
//! Scoring is deliberately strict 0/1: an output earns the point only if it
//! resolves to exactly one label from the task's label set. Outputs that
//! resolve to no label — or to more than one — are recorded with the
//! [`UNPARSED`] sentinel and score 0, so "the model rambled" is visible in
//! the error distribution instead of being silently dropped.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::{self, BackendError, InferenceOutcome, ModelHandle};
use crate::strategy::PromptCandidate;
use crate::task::{Dataset, SplitTag, Task};

/// Sentinel predicted label for outputs that could not be resolved to a
/// unique label from the label set.
pub const UNPARSED: &str = "UNPARSED";

/// Punctuation stripped from the end of answers before matching: common
/// ASCII terminators plus their full-width CJK counterparts.
const TRAILING_PUNCT: &[char] = &[
    '.', ',', ';', ':', '!', '?', '。', '，', '！', '？', '；', '：',
];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("sample '{sample_id}': gold label '{label}' is not in the task label set")]
    GoldNotInLabelSet { sample_id: String, label: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Canonical text form used for all label comparisons: trimmed, trailing
/// punctuation removed, lower-cased.
pub fn normalize_text(s: &str) -> String {
    let mut t = s.trim();
    loop {
        let stripped = t.trim_end_matches(TRAILING_PUNCT).trim_end();
        if stripped.len() == t.len() {
            break;
        }
        t = stripped;
    }
    t.to_lowercase()
}

/// Resolves a raw model output to one canonical label from `label_set`, or
/// `None` if it matches no label or ambiguously matches several.
///
/// Matching runs in two stages on normalized text: exact equality first,
/// then a unique-substring scan. In the substring stage an occurrence of a
/// shorter label that lies entirely inside an occurrence of a longer label
/// (e.g. "cat" inside "catfish") does not count as the shorter label.
pub fn normalize_answer(raw: &str, label_set: &[String]) -> Option<String> {
    let norm = normalize_text(raw);
    if norm.is_empty() {
        return None;
    }
    let normalized_labels: Vec<String> = label_set.iter().map(|l| normalize_text(l)).collect();
    for (label, nl) in label_set.iter().zip(&normalized_labels) {
        if &norm == nl {
            return Some(label.clone());
        }
    }

    let occurrences = |needle: &str| -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut from = 0;
        while let Some(pos) = norm[from..].find(needle) {
            let start = from + pos;
            spans.push((start, start + needle.len()));
            from = start + 1;
            if from >= norm.len() {
                break;
            }
        }
        spans
    };

    let all_spans: Vec<Vec<(usize, usize)>> =
        normalized_labels.iter().map(|nl| occurrences(nl)).collect();

    let mut matched: Vec<usize> = Vec::new();
    for (i, spans) in all_spans.iter().enumerate() {
        let ni = &normalized_labels[i];
        // Label i counts if some occurrence is not swallowed by an
        // occurrence of a different, longer label.
        let counts = spans.iter().any(|&(s, e)| {
            !all_spans.iter().enumerate().any(|(j, other)| {
                j != i
                    && normalized_labels[j].len() > ni.len()
                    && other.iter().any(|&(os, oe)| os <= s && e <= oe)
            })
        });
        if counts {
            matched.push(i);
        }
    }
    match matched.as_slice() {
        [only] => Some(label_set[*only].clone()),
        _ => None,
    }
}

/// The scored outcome for one sample. `predicted_label` and `gold_label`
/// hold canonical label-set spellings (or [`UNPARSED`] for the prediction).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub raw_output: String,
    pub predicted_label: String,
    pub gold_label: String,
    pub score: u8,
}

/// Scores one raw output against its gold label. Fails if the gold label is
/// not in the label set; never fails on weird model output.
pub fn score_sample(
    sample_id: &str,
    raw_output: &str,
    gold_label: &str,
    label_set: &[String],
) -> Result<SampleRecord, EvalError> {
    let gold_norm = normalize_text(gold_label);
    let canonical_gold = label_set
        .iter()
        .find(|l| normalize_text(l) == gold_norm)
        .ok_or_else(|| EvalError::GoldNotInLabelSet {
            sample_id: sample_id.to_string(),
            label: gold_label.to_string(),
        })?;
    let predicted = normalize_answer(raw_output, label_set);
    let score = match &predicted {
        Some(p) => u8::from(normalize_text(p) == gold_norm),
        None => 0,
    };
    Ok(SampleRecord {
        sample_id: sample_id.to_string(),
        raw_output: raw_output.to_string(),
        predicted_label: predicted.unwrap_or_else(|| UNPARSED.to_string()),
        gold_label: canonical_gold.clone(),
        score,
    })
}

/// Counts of wrong answers bucketed by (gold label, predicted label), where
/// the predicted side may be [`UNPARSED`]. Only score-0 records contribute.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ErrorDistribution {
    buckets: BTreeMap<(String, String), u64>,
}

impl ErrorDistribution {
    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Total number of wrong answers across all buckets.
    pub fn total(&self) -> u64 {
        self.buckets.values().sum()
    }

    pub fn count(&self, gold: &str, predicted: &str) -> u64 {
        self.buckets
            .get(&(gold.to_string(), predicted.to_string()))
            .copied()
            .unwrap_or(0)
    }

    /// Buckets in deterministic (gold, predicted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.buckets
            .iter()
            .map(|((g, p), &c)| (g.as_str(), p.as_str(), c))
    }

    /// Buckets ordered by descending count, ties broken by (gold, predicted).
    pub fn by_count_desc(&self) -> Vec<(&str, &str, u64)> {
        let mut rows: Vec<_> = self.iter().collect();
        rows.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1))));
        rows
    }

    /// Human-readable rendering used when the distribution is shown to an
    /// optimizer model, largest buckets first.
    pub fn render(&self) -> String {
        if self.buckets.is_empty() {
            return "(no errors)".to_string();
        }
        self.by_count_desc()
            .into_iter()
            .map(|(g, p, c)| format!("gold '{g}' -> predicted '{p}': {c} cases"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Serialized as a sorted array of `{gold, predicted, count}` rows so the
/// JSON form is deterministic.
#[derive(Serialize, Deserialize)]
struct BucketRow {
    gold: String,
    predicted: String,
    count: u64,
}

impl Serialize for ErrorDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<BucketRow> = self
            .buckets
            .iter()
            .map(|((g, p), &c)| BucketRow {
                gold: g.clone(),
                predicted: p.clone(),
                count: c,
            })
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ErrorDistribution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<BucketRow>::deserialize(deserializer)?;
        let mut buckets = BTreeMap::new();
        for row in rows {
            if buckets
                .insert((row.gold, row.predicted), row.count)
                .is_some()
            {
                return Err(D::Error::custom("duplicate error-distribution bucket"));
            }
        }
        Ok(ErrorDistribution { buckets })
    }
}

/// Tallies the error distribution over the score-0 records.
pub fn compute_error_distribution(records: &[SampleRecord]) -> ErrorDistribution {
    let mut buckets: BTreeMap<(String, String), u64> = BTreeMap::new();
    for r in records {
        if r.score == 0 {
            *buckets
                .entry((r.gold_label.clone(), r.predicted_label.clone()))
                .or_insert(0) += 1;
        }
    }
    ErrorDistribution { buckets }
}

/// A full evaluation of one prompt on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub prompt: PromptCandidate,
    pub task_id: String,
    pub dataset_tag: SplitTag,
    pub records: Vec<SampleRecord>,
    pub accuracy: f64,
    pub error_distribution: ErrorDistribution,
}

impl EvalResult {
    pub fn correct(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.score)).sum()
    }
}

/// Runs a prompt over every sample in the dataset and scores the outputs.
///
/// Per-sample inference failures are not fatal: they are recorded with an
/// error marker as the raw output and score 0. Only a backend failure that
/// takes down every sample aborts the evaluation.
pub fn evaluate_prompt(
    prompt: &PromptCandidate,
    dataset: &Dataset,
    task: &Task,
    model: &ModelHandle,
) -> Result<EvalResult, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let outcomes = backend::batch_infer(&prompt.text, &dataset.samples, model)?;
    debug_assert_eq!(outcomes.len(), dataset.samples.len());
    let mut records = Vec::with_capacity(dataset.samples.len());
    for (sample, outcome) in dataset.samples.iter().zip(outcomes) {
        let record = match outcome {
            InferenceOutcome::Text(text) => score_sample(
                &sample.sample_id,
                &text,
                &sample.gold_label,
                &task.label_set,
            )?,
            InferenceOutcome::Failed(msg) => {
                let mut r =
                    score_sample(&sample.sample_id, "", &sample.gold_label, &task.label_set)?;
                r.raw_output = format!("<inference failed: {msg}>");
                r
            }
        };
        records.push(record);
    }
    let correct: u64 = records.iter().map(|r| u64::from(r.score)).sum();
    let accuracy = correct as f64 / records.len() as f64;
    let error_distribution = compute_error_distribution(&records);
    Ok(EvalResult {
        prompt: prompt.clone(),
        task_id: task.task_id.clone(),
        dataset_tag: dataset.split_tag,
        records,
        accuracy,
        error_distribution,
    })
}
