//! Cross-run reward memory.
//!
//! Every (task, model) pair owns a bank of action statistics: for each
//! strategy combination tried so far, the running mean reward and the
//! number of observations. A later run on a similar task/model pair picks
//! the most similar stored entry, shrinks its means toward their global
//! average in proportion to the similarity (low similarity: trust the
//! transferred experience less), and uses the result as its starting prior.
//!
//! The on-disk file carries a schema `version` plus a `revision` counter
//! that increments on every mutation; `save` refuses to clobber a file
//! whose revision moved since we loaded it, and [`MemoryModule::save_with_retry`]
//! resolves such races by replaying this process's updates onto the
//! newer file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatMessage, ModelHandle};
use crate::strategy::StrategyCombo;

/// Current on-disk schema version.
pub const MEMORY_SCHEMA_VERSION: u64 = 1;

/// Identity of one memory entry. `(task_id, model_id)` is the unique key;
/// `task_descriptor` is free text shown to similarity judges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryKey {
    pub task_id: String,
    pub model_id: String,
    #[serde(default)]
    pub task_descriptor: String,
}

impl MemoryKey {
    pub fn new(
        task_id: impl Into<String>,
        model_id: impl Into<String>,
        task_descriptor: impl Into<String>,
    ) -> Self {
        MemoryKey {
            task_id: task_id.into(),
            model_id: model_id.into(),
            task_descriptor: task_descriptor.into(),
        }
    }

    fn same_pair(&self, other: &MemoryKey) -> bool {
        self.task_id == other.task_id && self.model_id == other.model_id
    }
}

/// Running statistics for one strategy combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub combo: StrategyCombo,
    pub mean_reward: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemoryEntry {
    #[serde(flatten)]
    key: MemoryKey,
    actions: Vec<ActionStats>,
}

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt memory file: {0}")]
    Corrupt(String),
    #[error(
        "memory file has schema version {found}, this build reads version {MEMORY_SCHEMA_VERSION}"
    )]
    SchemaVersionMismatch { found: u64 },
    #[error("memory file changed on disk (revision {disk:?}, expected {expected:?})")]
    VersionConflict {
        disk: Option<u64>,
        expected: Option<u64>,
    },
    #[error("still conflicting after {attempts} save attempts")]
    ConflictUnresolved { attempts: u32 },
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("similarity rho {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("action statistics are empty")]
    EmptyStats,
    #[error("similarity provider failed: {0}")]
    SimilarityProviderFailure(String),
}

/// Scores how transferable experience is from a stored (task, model) pair
/// to the current target pair, as rho in [0, 1].
pub trait SimilarityProvider {
    fn similarity(&self, stored: &MemoryKey, target: &MemoryKey) -> Result<f64, String>;
}

/// Table-driven similarity: explicit overrides, identity for the exact same
/// (task, model) pair, a fixed default for everything else.
pub struct StaticSimilarity {
    overrides: HashMap<(String, String), f64>,
    default_rho: f64,
}

impl StaticSimilarity {
    pub fn new(default_rho: f64) -> Self {
        StaticSimilarity {
            overrides: HashMap::new(),
            default_rho,
        }
    }

    pub fn with_override(
        mut self,
        task_id: impl Into<String>,
        model_id: impl Into<String>,
        rho: f64,
    ) -> Self {
        self.overrides
            .insert((task_id.into(), model_id.into()), rho);
        self
    }
}

impl SimilarityProvider for StaticSimilarity {
    fn similarity(&self, stored: &MemoryKey, target: &MemoryKey) -> Result<f64, String> {
        if let Some(&rho) = self
            .overrides
            .get(&(stored.task_id.clone(), stored.model_id.clone()))
        {
            return Ok(rho);
        }
        if stored.same_pair(target) {
            return Ok(1.0);
        }
        Ok(self.default_rho)
    }
}

/// Asks an optimizer model to rate similarity; the reply must contain a
/// number, which is clamped into [0, 1].
pub struct ModelJudgeSimilarity {
    handle: ModelHandle,
}

impl ModelJudgeSimilarity {
    pub fn new(handle: ModelHandle) -> Self {
        ModelJudgeSimilarity { handle }
    }
}

fn describe(key: &MemoryKey) -> &str {
    if key.task_descriptor.trim().is_empty() {
        &key.task_id
    } else {
        &key.task_descriptor
    }
}

fn first_float(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            let mut end = i;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if let Ok(v) = text[start..end].trim_end_matches('.').parse::<f64>() {
                return Some(v);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    None
}

impl SimilarityProvider for ModelJudgeSimilarity {
    fn similarity(&self, stored: &MemoryKey, target: &MemoryKey) -> Result<f64, String> {
        let prompt = include_str!("../resources/similarity_judge.txt")
            .replace("{reference_model}", &stored.model_id)
            .replace("{reference_task}", describe(stored))
            .replace("{target_model}", &target.model_id)
            .replace("{target_task}", describe(target));
        let message = ChatMessage::text(self.handle.model.template_role, prompt);
        let reply = self
            .handle
            .complete_text(vec![message])
            .map_err(|e| e.to_string())?;
        let value = first_float(&reply)
            .ok_or_else(|| format!("no number in similarity judgement: {reply:.60}"))?;
        Ok(value.clamp(0.0, 1.0))
    }
}

/// Shrinks every mean toward the global (unweighted) mean of the given
/// stats: `mean' = rho * mean + (1 - rho) * global_mean`. Counts reset to 0
/// because transferred observations are a prior, not data. `rho = 1` keeps
/// the means bit-for-bit; `rho = 0` flattens them all to the global mean.
pub fn smooth_distribution(
    stats: &[ActionStats],
    rho: f64,
) -> Result<Vec<ActionStats>, MemoryError> {
    if !(rho.is_finite() && (0.0..=1.0).contains(&rho)) {
        return Err(MemoryError::InvalidRho(rho));
    }
    if stats.is_empty() {
        return Err(MemoryError::EmptyStats);
    }
    let global_mean = stats.iter().map(|s| s.mean_reward).sum::<f64>() / stats.len() as f64;
    Ok(stats
        .iter()
        .map(|s| {
            let mean_reward = if rho == 1.0 {
                s.mean_reward
            } else if rho == 0.0 {
                global_mean
            } else {
                rho * s.mean_reward + (1.0 - rho) * global_mean
            };
            ActionStats {
                combo: s.combo.clone(),
                mean_reward,
                count: 0,
            }
        })
        .collect())
}

/// The `k` best actions: descending mean reward, ties broken by descending
/// count, then by combo order so the result is deterministic.
pub fn top_k(stats: &[ActionStats], k: usize) -> Vec<StrategyCombo> {
    let mut sorted: Vec<&ActionStats> = stats.iter().collect();
    sorted.sort_by(|a, b| {
        b.mean_reward
            .total_cmp(&a.mean_reward)
            .then_with(|| b.count.cmp(&a.count))
            .then_with(|| a.combo.cmp(&b.combo))
    });
    sorted
        .into_iter()
        .take(k)
        .map(|s| s.combo.clone())
        .collect()
}

/// Replayable mutation, kept so a save conflict can be resolved by
/// re-applying this process's changes on top of the newer file.
#[derive(Debug, Clone)]
enum MemoryEvent {
    Update {
        key: MemoryKey,
        combo: StrategyCombo,
        reward: f64,
    },
    Install {
        key: MemoryKey,
        stats: Vec<ActionStats>,
    },
    Prune {
        min_count: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    version: u64,
    #[serde(default)]
    revision: u64,
    entries: Vec<MemoryEntry>,
}

/// In-memory view of the reward memory plus its persistence state.
#[derive(Debug, Clone, Default)]
pub struct MemoryModule {
    entries: Vec<MemoryEntry>,
    revision: u64,
    /// Disk revision observed when this module was loaded; `None` when the
    /// module started from scratch (no file existed).
    loaded_revision: Option<u64>,
    journal: Vec<MemoryEvent>,
}

impl MemoryModule {
    pub fn new() -> Self {
        MemoryModule::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// All entries as (key, action stats), in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&MemoryKey, &[ActionStats])> {
        self.entries.iter().map(|e| (&e.key, e.actions.as_slice()))
    }

    pub fn stats(&self, key: &MemoryKey) -> Option<&[ActionStats]> {
        self.entries
            .iter()
            .find(|e| e.key.same_pair(key))
            .map(|e| e.actions.as_slice())
    }

    fn entry_mut(&mut self, key: &MemoryKey) -> &mut MemoryEntry {
        if let Some(pos) = self.entries.iter().position(|e| e.key.same_pair(key)) {
            &mut self.entries[pos]
        } else {
            self.entries.push(MemoryEntry {
                key: key.clone(),
                actions: Vec::new(),
            });
            self.entries.last_mut().expect("just pushed")
        }
    }

    fn apply_update(&mut self, key: &MemoryKey, combo: &StrategyCombo, reward: f64) {
        let entry = self.entry_mut(key);
        if entry.key.task_descriptor.is_empty() && !key.task_descriptor.is_empty() {
            entry.key.task_descriptor = key.task_descriptor.clone();
        }
        let action = match entry.actions.iter().position(|a| &a.combo == combo) {
            Some(pos) => &mut entry.actions[pos],
            None => {
                entry.actions.push(ActionStats {
                    combo: combo.clone(),
                    mean_reward: 0.0,
                    count: 0,
                });
                entry.actions.last_mut().expect("just pushed")
            }
        };
        action.mean_reward =
            (action.mean_reward * action.count as f64 + reward) / (action.count + 1) as f64;
        action.count += 1;
        self.revision += 1;
    }

    /// Folds one observed reward into the running mean for `(key, combo)`,
    /// creating the entry and the action on first sight.
    pub fn update(
        &mut self,
        key: &MemoryKey,
        combo: &StrategyCombo,
        reward: f64,
    ) -> Result<(), MemoryError> {
        if !(reward.is_finite() && (0.0..=1.0).contains(&reward)) {
            return Err(MemoryError::RewardOutOfRange(reward));
        }
        self.apply_update(key, combo, reward);
        self.journal.push(MemoryEvent::Update {
            key: key.clone(),
            combo: combo.clone(),
            reward,
        });
        Ok(())
    }

    fn apply_install(&mut self, key: &MemoryKey, stats: &[ActionStats]) {
        let entry = self.entry_mut(key);
        entry.key = key.clone();
        entry.actions = stats.to_vec();
        self.revision += 1;
    }

    /// Replaces (or creates) the whole action bank for `key`, used to seed
    /// a target entry with a smoothed prior before a warm search.
    pub fn install_prior(&mut self, key: &MemoryKey, stats: Vec<ActionStats>) {
        self.apply_install(key, &stats);
        self.journal.push(MemoryEvent::Install {
            key: key.clone(),
            stats,
        });
    }

    fn apply_prune(&mut self, min_count: u64) {
        for entry in &mut self.entries {
            entry.actions.retain(|a| a.count >= min_count);
        }
        self.entries.retain(|e| !e.actions.is_empty());
        self.revision += 1;
    }

    /// Drops actions observed fewer than `min_count` times (and entries
    /// left empty). Useful for shedding never-confirmed prior mass.
    pub fn prune(&mut self, min_count: u64) {
        self.apply_prune(min_count);
        self.journal.push(MemoryEvent::Prune { min_count });
    }

    /// Picks the stored entry most similar to `target`, returning its key
    /// and rho. Ties go to the lexicographically first (task_id, model_id);
    /// entries with no actions are skipped. `Ok(None)` means the memory has
    /// nothing usable and the caller should fall back to a cold start.
    pub fn select_reference(
        &self,
        target: &MemoryKey,
        provider: &dyn SimilarityProvider,
    ) -> Result<Option<(MemoryKey, f64)>, MemoryError> {
        let mut candidates: Vec<&MemoryEntry> = self
            .entries
            .iter()
            .filter(|e| !e.actions.is_empty())
            .collect();
        candidates.sort_by(|a, b| {
            (&a.key.task_id, &a.key.model_id).cmp(&(&b.key.task_id, &b.key.model_id))
        });
        let mut best: Option<(MemoryKey, f64)> = None;
        for entry in candidates {
            let rho = provider
                .similarity(&entry.key, target)
                .map_err(MemoryError::SimilarityProviderFailure)?
                .clamp(0.0, 1.0);
            let better = match &best {
                None => true,
                Some((_, best_rho)) => rho > *best_rho,
            };
            if better {
                best = Some((entry.key.clone(), rho));
            }
        }
        Ok(best)
    }

    fn parse(text: &str) -> Result<MemoryFile, MemoryError> {
        let file: MemoryFile =
            serde_json::from_str(text).map_err(|e| MemoryError::Corrupt(e.to_string()))?;
        if file.version != MEMORY_SCHEMA_VERSION {
            return Err(MemoryError::SchemaVersionMismatch {
                found: file.version,
            });
        }
        for (i, entry) in file.entries.iter().enumerate() {
            if file.entries[..i]
                .iter()
                .any(|e| e.key.same_pair(&entry.key))
            {
                return Err(MemoryError::Corrupt(format!(
                    "duplicate entry for task '{}' model '{}'",
                    entry.key.task_id, entry.key.model_id
                )));
            }
            for action in &entry.actions {
                let ids = action.combo.ids();
                for (j, id) in ids.iter().enumerate() {
                    if ids[..j].contains(id) {
                        return Err(MemoryError::Corrupt(format!(
                            "combo {} repeats strategy '{id}'",
                            action.combo
                        )));
                    }
                }
                if !(action.mean_reward.is_finite() && (0.0..=1.0).contains(&action.mean_reward)) {
                    return Err(MemoryError::Corrupt(format!(
                        "mean reward {} outside [0, 1]",
                        action.mean_reward
                    )));
                }
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path)?;
        let file = Self::parse(&text)?;
        Ok(MemoryModule {
            entries: file.entries,
            revision: file.revision,
            loaded_revision: Some(file.revision),
            journal: Vec::new(),
        })
    }

    /// Loads `path` if it exists, otherwise starts empty (and remembers
    /// that no file existed, for conflict detection at save time).
    pub fn load_or_default(path: &Path) -> Result<Self, MemoryError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(MemoryModule::new())
        }
    }

    /// Serializes the module (schema version, revision, entries) as pretty
    /// JSON.
    pub fn to_json(&self) -> String {
        let file = MemoryFile {
            version: MEMORY_SCHEMA_VERSION,
            revision: self.revision,
            entries: self.entries.clone(),
        };
        serde_json::to_string_pretty(&file).expect("memory serialization cannot fail")
    }

    /// Writes the memory file atomically (temp file + rename), refusing if
    /// the on-disk revision is not the one this module loaded.
    pub fn save(&mut self, path: &Path) -> Result<(), MemoryError> {
        if path.exists() {
            let disk = Self::parse(&fs::read_to_string(path)?)?;
            if Some(disk.revision) != self.loaded_revision {
                return Err(MemoryError::VersionConflict {
                    disk: Some(disk.revision),
                    expected: self.loaded_revision,
                });
            }
        } else if self.loaded_revision.is_some() {
            return Err(MemoryError::VersionConflict {
                disk: None,
                expected: self.loaded_revision,
            });
        }
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        fs::write(&tmp, self.to_json())?;
        fs::rename(&tmp, path)?;
        self.loaded_revision = Some(self.revision);
        self.journal.clear();
        Ok(())
    }

    /// Like [`MemoryModule::save`], but on a revision conflict reloads the
    /// newer file, replays this module's journalled mutations onto it, and
    /// tries again — so concurrent writers merge instead of clobbering.
    pub fn save_with_retry(&mut self, path: &Path, attempts: u32) -> Result<(), MemoryError> {
        for _ in 0..attempts.max(1) {
            match self.save(path) {
                Ok(()) => return Ok(()),
                Err(MemoryError::VersionConflict { .. }) => {
                    let mut fresh = Self::load_or_default(path)?;
                    for event in &self.journal {
                        match event {
                            MemoryEvent::Update { key, combo, reward } => {
                                fresh.apply_update(key, combo, *reward)
                            }
                            MemoryEvent::Install { key, stats } => fresh.apply_install(key, stats),
                            MemoryEvent::Prune { min_count } => fresh.apply_prune(*min_count),
                        }
                    }
                    fresh.journal = self.journal.clone();
                    *self = fresh;
                }
                Err(other) => return Err(other),
            }
        }
        Err(MemoryError::ConflictUnresolved {
            attempts: attempts.max(1),
        })
    }
}
