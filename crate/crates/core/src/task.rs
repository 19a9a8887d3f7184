//! Tasks, labelled samples, and datasets: JSONL ingest, validation, and
//! deterministic train/validation splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval;

/// A classification-style task definition: what the model is asked to do and
/// which labels count as answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub category: String,
    /// The human-written starting prompt that optimization begins from.
    pub initial_prompt: String,
    pub label_set: Vec<String>,
    #[serde(default)]
    pub description: String,
}

/// How a media payload should be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Path,
    Url,
    Base64,
}

/// A reference to one piece of (image) media attached to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub payload: String,
}

/// One labelled sample. Text-only samples simply have an empty media list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    #[serde(default)]
    pub media: Vec<MediaRef>,
    pub gold_label: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// Which slice of the data an evaluation ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Unsplit,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        };
        f.write_str(s)
    }
}

/// An ordered collection of samples bound to a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task_id: String,
    pub split_tag: SplitTag,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A single rule broken by a task definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse task file: {0}")]
    TaskParse(#[from] serde_json::Error),
    #[error("invalid task definition: {}", format_violations(.0))]
    InvalidTask(Vec<Violation>),
    #[error("line {line}: malformed sample record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("sample '{sample_id}': gold label '{label}' is not in the task label set")]
    UnknownLabel { sample_id: String, label: String },
    #[error("duplicate sample id '{sample_id}'")]
    DuplicateSampleId { sample_id: String },
    #[error("dataset contains no samples")]
    EmptyDataset,
    #[error("bad split fractions train={train}, validation={validation}: each must be >= 0 and they must sum to (0, 1]")]
    BadFractions { train: f64, validation: f64 },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks a task definition and returns every broken rule (empty = valid).
pub fn validate_task(task: &Task) -> Vec<Violation> {
    let mut violations = Vec::new();
    if task.task_id.trim().is_empty() {
        violations.push(Violation {
            field: "task_id".into(),
            message: "must be non-empty".into(),
        });
    }
    if task.initial_prompt.trim().is_empty() {
        violations.push(Violation {
            field: "initial_prompt".into(),
            message: "must be non-empty".into(),
        });
    }
    if task.label_set.len() < 2 {
        violations.push(Violation {
            field: "label_set".into(),
            message: format!("needs at least 2 labels, got {}", task.label_set.len()),
        });
    }
    let mut seen = Vec::new();
    for label in &task.label_set {
        let norm = eval::normalize_text(label);
        if norm.is_empty() {
            violations.push(Violation {
                field: "label_set".into(),
                message: format!("label '{label}' normalizes to the empty string"),
            });
        } else if seen.contains(&norm) {
            violations.push(Violation {
                field: "label_set".into(),
                message: format!("label '{label}' collides with another label after normalization"),
            });
        } else {
            seen.push(norm);
        }
    }
    violations
}

/// Loads and validates a task definition from a JSON file.
pub fn load_task(path: &Path) -> Result<Task, DataError> {
    let text = fs::read_to_string(path)?;
    let task: Task = serde_json::from_str(&text)?;
    let violations = validate_task(&task);
    if violations.is_empty() {
        Ok(task)
    } else {
        Err(DataError::InvalidTask(violations))
    }
}

/// On-disk JSONL shape of one sample. Field order here fixes the byte layout
/// written by [`save_dataset`].
#[derive(Serialize, Deserialize)]
struct SampleLine {
    sample_id: String,
    image: Option<String>,
    image_kind: Option<String>,
    gold_label: String,
    #[serde(default)]
    extra: BTreeMap<String, String>,
}

fn media_from_line(
    image: Option<String>,
    image_kind: Option<String>,
) -> Result<Vec<MediaRef>, String> {
    let Some(payload) = image else {
        return Ok(Vec::new());
    };
    let kind = match image_kind.as_deref() {
        None | Some("path") => MediaKind::Path,
        Some("url") => MediaKind::Url,
        Some("base64") => MediaKind::Base64,
        Some(other) => return Err(format!("unknown image_kind '{other}'")),
    };
    Ok(vec![MediaRef { kind, payload }])
}

fn media_to_line(media: &[MediaRef]) -> (Option<String>, Option<String>) {
    match media.first() {
        None => (None, None),
        Some(m) => {
            let kind = match m.kind {
                MediaKind::Path => "path",
                MediaKind::Url => "url",
                MediaKind::Base64 => "base64",
            };
            (Some(m.payload.clone()), Some(kind.to_string()))
        }
    }
}

/// Reads a JSONL dataset, checking every gold label against the task's label
/// set (using the same normalization the scorer applies) and rejecting
/// duplicate sample ids. Line numbers in errors are 1-based.
pub fn load_dataset(path: &Path, task: &Task) -> Result<Dataset, DataError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen_ids: Vec<String> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let media = media_from_line(parsed.image, parsed.image_kind).map_err(|reason| {
            DataError::MalformedLine {
                line: line_no,
                reason,
            }
        })?;
        let gold_norm = eval::normalize_text(&parsed.gold_label);
        let known = task
            .label_set
            .iter()
            .any(|l| eval::normalize_text(l) == gold_norm);
        if !known {
            return Err(DataError::UnknownLabel {
                sample_id: parsed.sample_id,
                label: parsed.gold_label,
            });
        }
        if seen_ids.contains(&parsed.sample_id) {
            return Err(DataError::DuplicateSampleId {
                sample_id: parsed.sample_id,
            });
        }
        seen_ids.push(parsed.sample_id.clone());
        samples.push(Sample {
            sample_id: parsed.sample_id,
            media,
            gold_label: parsed.gold_label,
            extra: parsed.extra,
        });
    }
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset {
        task_id: task.task_id.clone(),
        split_tag: SplitTag::Unsplit,
        samples,
    })
}

/// Writes a dataset back out as JSONL in canonical field order, one sample
/// per line. `load_dataset` followed by `save_dataset` is byte-stable.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    for sample in &dataset.samples {
        let (image, image_kind) = media_to_line(&sample.media);
        let line = SampleLine {
            sample_id: sample.sample_id.clone(),
            image,
            image_kind,
            gold_label: sample.gold_label.clone(),
            extra: sample.extra.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(DataError::TaskParse)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Splits a dataset into (train, validation) with a seeded shuffle deciding
/// membership. Validation gets `floor(validation_fraction * n)` samples and
/// train absorbs the remainder; within each split the original sample order
/// is preserved, so the result is a pure function of `(dataset, fractions,
/// seed)`.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let (train_f, val_f) = fractions;
    let sum = train_f + val_f;
    if !(train_f >= 0.0 && val_f >= 0.0 && sum > 0.0 && sum <= 1.0 + 1e-12) {
        return Err(DataError::BadFractions {
            train: train_f,
            validation: val_f,
        });
    }
    if dataset.samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = dataset.samples.len();
    let val_n = (val_f * n as f64).floor() as usize;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = indices[..val_n].to_vec();
    let mut train_idx: Vec<usize> = indices[val_n..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize], tag: SplitTag| Dataset {
        task_id: dataset.task_id.clone(),
        split_tag: tag,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((
        pick(&train_idx, SplitTag::Train),
        pick(&val_idx, SplitTag::Validation),
    ))
}
