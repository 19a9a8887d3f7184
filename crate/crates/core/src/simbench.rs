//! Synthetic reward landscapes for offline benchmarking of the search
//! stage, plus the benchmark and ablation runners built on them.
//!
//! A landscape assigns every ordered strategy combination a ground-truth
//! reward: a base level, one additive effect per strategy, a symmetric
//! interaction and a directional order bonus per pair — clipped to [0, 1]
//! and quantized to the accuracy grid `1/dataset_size`. Strategies are
//! abstract markers (`[strategy:s3]`), so composing a combo produces a
//! prompt whose markers encode exactly which combo it was; the landscape
//! reads them back as an [`AnswerHook`] for the simulated backend. Because
//! rewards live on the accuracy grid, the accuracy measured by a real
//! evaluation equals the landscape's reward bit for bit, which makes
//! regret arithmetic exact.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    AnswerHook, CaptureSpec, ModelHandle, ModelRef, SampleMeta, SimBackend, SimRule, SimScript,
};
use crate::eval::EvalResult;
use crate::memory::{MemoryKey, MemoryModule};
use crate::refine::{self, RefineConfig, RefineError, RefineSession, ReflectionTemplates};
use crate::search::{self, SearchConfig, SearchError, SearchSession, SearchTrace};
use crate::strategy::{
    PromptCandidate, Strategy, StrategyCombo, StrategyId, StrategyMode, StrategyPool,
};
use crate::task::{Dataset, MediaKind, MediaRef, Sample, SplitTag, Task};

/// A two-label task whose samples carry simulator metadata instead of real
/// content. Used by every synthetic benchmark and test fixture.
pub fn synthetic_task(task_id: &str) -> Task {
    Task {
        task_id: task_id.to_string(),
        name: format!("synthetic task {task_id}"),
        category: "synthetic".into(),
        initial_prompt: "Answer the question with yes or no.".into(),
        label_set: vec!["yes".into(), "no".into()],
        description: "Synthetic two-label task answered by the simulated backend.".into(),
    }
}

/// `n` samples for a synthetic task. Gold is always the first label; the
/// simulator decides per sample whether to answer gold or the alternative.
pub fn synthetic_dataset(task: &Task, n: usize, split_tag: SplitTag) -> Dataset {
    let gold = task.label_set[0].clone();
    let alt = task.label_set[1].clone();
    Dataset {
        task_id: task.task_id.clone(),
        split_tag,
        samples: (0..n)
            .map(|i| Sample {
                sample_id: format!("sample-{i:04}"),
                media: vec![MediaRef {
                    kind: MediaKind::Url,
                    payload: SampleMeta {
                        index: i,
                        total: n,
                        gold: gold.clone(),
                        alt: alt.clone(),
                    }
                    .payload(),
                }],
                gold_label: gold.clone(),
                extra: BTreeMap::new(),
            })
            .collect(),
    }
}

/// Shape of a landscape family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeParams {
    pub pool_size: usize,
    pub max_depth: usize,
    /// Rewards are quantized to multiples of `1 / dataset_size`.
    pub dataset_size: usize,
    /// Reward of the empty combination before quantization.
    pub base_level: f64,
    /// Added (before clipping) when a prompt carries a refinement marker;
    /// models the gain the reflective stage can unlock.
    pub refine_bonus: f64,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        LandscapeParams {
            pool_size: 8,
            max_depth: 2,
            dataset_size: 100,
            base_level: 0.35,
            refine_bonus: 0.0,
        }
    }
}

const MARKER_PREFIX: &str = "[strategy:";
const REFINE_MARKER: &str = "[refined]";

/// One sampled ground-truth reward function.
#[derive(Debug, Clone)]
pub struct Landscape {
    params: LandscapeParams,
    /// Additive effect per strategy.
    base_effects: Vec<f64>,
    /// Symmetric pairwise interaction, indexed `[min][max]`.
    pair_effects: Vec<Vec<f64>>,
    /// Directional bonus when strategy `i` is applied before `j`.
    order_effects: Vec<Vec<f64>>,
}

impl Landscape {
    /// Samples a landscape: per-strategy effects from U(-0.08, 0.15),
    /// pair interactions from U(-0.06, 0.06), order bonuses from
    /// U(0, 0.04). Deterministic in `(params, seed)`.
    // Indexed loops keep the RNG draw order part of the (i, j) contract.
    #[allow(clippy::needless_range_loop)]
    pub fn generate(params: &LandscapeParams, seed: u64) -> Landscape {
        let n = params.pool_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_effects: Vec<f64> = (0..n).map(|_| rng.random_range(-0.08..0.15)).collect();
        let mut pair_effects = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                pair_effects[i][j] = rng.random_range(-0.06..0.06);
            }
        }
        let mut order_effects = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    order_effects[i][j] = rng.random_range(0.0..0.04);
                }
            }
        }
        Landscape {
            params: params.clone(),
            base_effects,
            pair_effects,
            order_effects,
        }
    }

    pub fn params(&self) -> &LandscapeParams {
        &self.params
    }

    pub fn strategy_ids(&self) -> Vec<StrategyId> {
        (0..self.params.pool_size)
            .map(|i| StrategyId::new(format!("s{i}")))
            .collect()
    }

    /// A pool of marker suffix strategies (`[strategy:s0]`, …) matching
    /// this landscape's strategy set.
    pub fn marker_pool(&self) -> StrategyPool {
        StrategyPool::new(
            (0..self.params.pool_size)
                .map(|i| Strategy {
                    strategy_id: StrategyId::new(format!("s{i}")),
                    mode: StrategyMode::Suffix,
                    template: format!("{MARKER_PREFIX}s{i}]"),
                })
                .collect(),
        )
        .expect("marker pool is valid by construction")
    }

    fn index_of(&self, id: &StrategyId) -> Option<usize> {
        let idx: usize = id.as_str().strip_prefix('s')?.parse().ok()?;
        (idx < self.params.pool_size).then_some(idx)
    }

    /// Snaps a raw value onto the accuracy grid after clipping to [0, 1].
    pub fn quantize(&self, x: f64) -> f64 {
        let n = self.params.dataset_size as f64;
        (x.clamp(0.0, 1.0) * n).round() / n
    }

    fn raw_reward(&self, indices: &[usize]) -> f64 {
        let mut r = self.params.base_level;
        for &i in indices {
            r += self.base_effects[i];
        }
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                r += self.pair_effects[i.min(j)][i.max(j)];
                r += self.order_effects[i][j];
            }
        }
        r
    }

    fn combo_indices(&self, combo: &StrategyCombo) -> Vec<usize> {
        combo
            .ids()
            .iter()
            .filter_map(|id| self.index_of(id))
            .collect()
    }

    /// Ground-truth reward of a combination (clipped and quantized).
    pub fn reward(&self, combo: &StrategyCombo) -> f64 {
        self.quantize(self.raw_reward(&self.combo_indices(combo)))
    }

    /// Reward before quantization, for building perturbed priors.
    pub fn unquantized_reward(&self, combo: &StrategyCombo) -> f64 {
        self.raw_reward(&self.combo_indices(combo)).clamp(0.0, 1.0)
    }

    /// Reads the strategy markers back out of a composed prompt (in
    /// application order, duplicates ignored) and returns the reward of
    /// that combination, plus the refine bonus if the prompt carries a
    /// refinement marker.
    pub fn reward_for_prompt(&self, text: &str) -> f64 {
        let mut indices = Vec::new();
        let mut from = 0;
        while let Some(pos) = text[from..].find(MARKER_PREFIX) {
            let start = from + pos + MARKER_PREFIX.len();
            let Some(close) = text[start..].find(']') else {
                break;
            };
            let id = StrategyId::new(&text[start..start + close]);
            if let Some(idx) = self.index_of(&id) {
                if !indices.contains(&idx) {
                    indices.push(idx);
                }
            }
            from = start + close + 1;
        }
        let mut raw = self.raw_reward(&indices);
        if text.contains(REFINE_MARKER) {
            raw += self.params.refine_bonus;
        }
        self.quantize(raw)
    }

    /// The best combination and its reward over the whole action space
    /// (ties: first in canonical enumeration order).
    pub fn oracle(&self) -> (StrategyCombo, f64) {
        let pool = self.marker_pool();
        let mut best: Option<(StrategyCombo, f64)> = None;
        for combo in search::enumerate_combos(&pool, self.params.max_depth) {
            let r = self.reward(&combo);
            if best.as_ref().is_none_or(|(_, b)| r > *b) {
                best = Some((combo, r));
            }
        }
        best.expect("action space is never empty")
    }
}

impl AnswerHook for Landscape {
    fn correct_fraction(&self, prompt_text: &str) -> f64 {
        self.reward_for_prompt(prompt_text)
    }
}

/// An inference handle whose simulated model answers according to the
/// landscape. Parallelism 1: the simulator is compute-bound and cheap.
pub fn landscape_handle(landscape: &Arc<Landscape>, seed: u64) -> ModelHandle {
    let mut model = ModelRef::inference("sim-landscape", "simulated");
    model.parallelism_limit = 1;
    ModelHandle::new(
        model,
        Arc::new(SimBackend::new(SimScript::default(), seed).with_hook(landscape.clone())),
    )
    .with_seed(seed)
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Refine(#[from] RefineError),
}

/// Which search variants a benchmark run compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// Exhaustive sweep of the whole action space.
    ColdExhaustive,
    /// Budgeted epsilon-greedy search warm-started from a perturbed prior.
    WarmEpsilonGreedy,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::ColdExhaustive => "cold_exhaustive",
            BenchMethod::WarmEpsilonGreedy => "warm_epsilon_greedy",
        }
    }
}

/// Settings for [`run_comparison`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub trials: usize,
    pub seed: u64,
    pub landscape: LandscapeParams,
    pub search: SearchConfig,
    /// Standard deviation of the Gaussian noise applied to the reference
    /// prior's means; the warm search's similarity is `1 - perturbation`.
    pub perturbation: f64,
    pub methods: Vec<BenchMethod>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            trials: 100,
            seed: 0,
            landscape: LandscapeParams::default(),
            search: SearchConfig::default(),
            perturbation: 0.05,
            methods: vec![BenchMethod::ColdExhaustive, BenchMethod::WarmEpsilonGreedy],
        }
    }
}

/// One (trial, method) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub trial: usize,
    pub evaluations: usize,
    pub best_reward: f64,
    pub oracle_reward: f64,
    /// `oracle_reward - best_reward`; non-negative because the simulator
    /// is noiseless.
    pub regret: f64,
}

/// Aggregates for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub trials: usize,
    pub mean_regret: f64,
    pub max_regret: f64,
    pub mean_evaluations: f64,
    /// Fraction of trials with regret exactly 0.
    pub zero_regret_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<MethodSummary>,
}

impl BenchReport {
    /// Fraction of a method's trials with regret at or below `threshold`.
    pub fn fraction_within(&self, method: BenchMethod, threshold: f64) -> f64 {
        let rows: Vec<&BenchRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method.name())
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.regret <= threshold).count() as f64 / rows.len() as f64
    }
}

fn trial_seed(base: u64, trial: usize, stream: u64) -> u64 {
    base.wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0x6A09_E667_F3BC_C909))
}

/// Builds the reference memory entry a warm trial starts from: every
/// combination's true (unquantized) reward plus Gaussian noise of the
/// configured standard deviation, one observation each.
fn perturbed_reference(
    landscape: &Landscape,
    pool: &StrategyPool,
    max_depth: usize,
    perturbation: f64,
    seed: u64,
    ref_key: &MemoryKey,
) -> MemoryModule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memory = MemoryModule::new();
    for combo in search::enumerate_combos(pool, max_depth) {
        let noise: f64 = if perturbation > 0.0 {
            // Box-Muller keeps the dependency footprint small.
            let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * perturbation
        } else {
            0.0
        };
        let mean = (landscape.unquantized_reward(&combo) + noise).clamp(0.0, 1.0);
        memory
            .update(ref_key, &combo, mean)
            .expect("clamped reward is in range");
    }
    memory
}

/// Runs the cold-versus-warm comparison over freshly sampled landscapes.
/// Rows come out in (trial, method) order and the whole report is a pure
/// function of the config.
pub fn run_comparison(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let mut rows = Vec::with_capacity(config.trials * config.methods.len());
    for trial in 0..config.trials {
        let landscape = Arc::new(Landscape::generate(
            &config.landscape,
            trial_seed(config.seed, trial, 1),
        ));
        let pool = landscape.marker_pool();
        let task = synthetic_task(&format!("bench-{trial:03}"));
        let data = synthetic_dataset(&task, config.landscape.dataset_size, SplitTag::Train);
        let handle = landscape_handle(&landscape, trial_seed(config.seed, trial, 2));
        let (_, oracle_reward) = landscape.oracle();

        for &method in &config.methods {
            let search_config = SearchConfig {
                max_depth: config.landscape.max_depth,
                seed: trial_seed(config.seed, trial, 3),
                ..config.search.clone()
            };
            let key = MemoryKey::new(task.task_id.clone(), "sim-landscape", "");
            let session = SearchSession {
                task: &task,
                data: &data,
                pool: &pool,
                inference: &handle,
                optimizer: None,
                config: &search_config,
                key: key.clone(),
            };
            let trace: SearchTrace = match method {
                BenchMethod::ColdExhaustive => {
                    let mut memory = MemoryModule::new();
                    search::cold_start_search(&session, &mut memory, &mut |_| {})?
                }
                BenchMethod::WarmEpsilonGreedy => {
                    let ref_key = MemoryKey::new("bench-reference", "sim-landscape", "");
                    let mut memory = perturbed_reference(
                        &landscape,
                        &pool,
                        config.landscape.max_depth,
                        config.perturbation,
                        trial_seed(config.seed, trial, 4),
                        &ref_key,
                    );
                    let rho = (1.0 - config.perturbation).clamp(0.0, 1.0);
                    search::warm_search(&session, &mut memory, &ref_key, rho, &mut |_| {})?
                }
            };
            rows.push(BenchRow {
                method: method.name().to_string(),
                trial,
                evaluations: trace.evaluations_used,
                best_reward: trace.best.reward,
                oracle_reward,
                regret: oracle_reward - trace.best.reward,
            });
        }
    }

    let summaries = config
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method.name()).collect();
            let n = mine.len().max(1) as f64;
            MethodSummary {
                method: method.name().to_string(),
                trials: mine.len(),
                mean_regret: mine.iter().map(|r| r.regret).sum::<f64>() / n,
                max_regret: mine.iter().map(|r| r.regret).fold(0.0, f64::max),
                mean_evaluations: mine.iter().map(|r| r.evaluations as f64).sum::<f64>() / n,
                zero_regret_fraction: mine.iter().filter(|r| r.regret == 0.0).count() as f64 / n,
            }
        })
        .collect();
    Ok(BenchReport {
        config: config.clone(),
        rows,
        summaries,
    })
}

/// Settings for [`run_two_stage_ablation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub trials: usize,
    pub seed: u64,
    pub landscape: LandscapeParams,
    pub search: SearchConfig,
    pub perturbation: f64,
    pub refine: RefineConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            trials: 50,
            seed: 0,
            landscape: LandscapeParams {
                refine_bonus: 0.1,
                ..LandscapeParams::default()
            },
            search: SearchConfig::default(),
            perturbation: 0.05,
            refine: RefineConfig {
                max_iterations: 2,
                ..RefineConfig::default()
            },
        }
    }
}

/// Best rewards reached by each pipeline stage on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub trial: usize,
    /// Accuracy of the unmodified initial prompt.
    pub baseline: f64,
    /// Best reward after the warm search stage alone.
    pub search_only: f64,
    /// Best accuracy after search plus reflective refinement.
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_baseline: f64,
    pub mean_search_only: f64,
    pub mean_full: f64,
}

/// Scripted optimizer for ablation trials: a fixed analysis object, and a
/// rewrite that appends the refinement marker to the current prompt
/// (extracted from the rewrite instruction via capture anchors).
fn ablation_optimizer(seed: u64) -> ModelHandle {
    let script = SimScript {
        rules: vec![
            SimRule {
                match_substring: "Please follow this format".into(),
                response: Some(
                    r#"{"Error Causes": "prompt underspecifies the labels", "Improvement Methods": "restate the task more directly"}"#
                        .into(),
                ),
                answer_fraction: None,
                capture: None,
            },
            SimRule {
                match_substring: "Please provide the revised prompt directly".into(),
                response: Some(format!("{{capture}} {REFINE_MARKER}")),
                answer_fraction: None,
                capture: Some(CaptureSpec {
                    after: "For the current inference, my prompt is:".into(),
                    before: Some("The current analysis".into()),
                }),
            },
        ],
        default_response: None,
    };
    ModelHandle::new(
        ModelRef::optimizer("sim-strong", "simulated"),
        Arc::new(SimBackend::new(script, seed)),
    )
}

/// Compares baseline prompt, search alone, and search plus refinement over
/// sampled landscapes whose refine bonus is fixed by the config. By
/// construction `full >= search_only` on every trial (the refinement keeps
/// its starting prompt when no rewrite beats it).
pub fn run_two_stage_ablation(config: &AblationConfig) -> Result<AblationReport, BenchError> {
    let mut rows = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let landscape = Arc::new(Landscape::generate(
            &config.landscape,
            trial_seed(config.seed, trial, 11),
        ));
        let pool = landscape.marker_pool();
        let task = synthetic_task(&format!("ablation-{trial:03}"));
        let train = synthetic_dataset(&task, config.landscape.dataset_size, SplitTag::Train);
        let validation =
            synthetic_dataset(&task, config.landscape.dataset_size, SplitTag::Validation);
        let handle = landscape_handle(&landscape, trial_seed(config.seed, trial, 12));

        // Baseline: the initial prompt as-is.
        let baseline_eval = crate::eval::evaluate_prompt(
            &PromptCandidate::base(&task.initial_prompt),
            &train,
            &task,
            &handle,
        )
        .map_err(SearchError::Eval)?;
        let baseline = baseline_eval.accuracy;

        // Stage one: warm search from a perturbed prior.
        let search_config = SearchConfig {
            max_depth: config.landscape.max_depth,
            seed: trial_seed(config.seed, trial, 13),
            ..config.search.clone()
        };
        let ref_key = MemoryKey::new("ablation-reference", "sim-landscape", "");
        let mut memory = perturbed_reference(
            &landscape,
            &pool,
            config.landscape.max_depth,
            config.perturbation,
            trial_seed(config.seed, trial, 14),
            &ref_key,
        );
        let session = SearchSession {
            task: &task,
            data: &train,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &search_config,
            key: MemoryKey::new(task.task_id.clone(), "sim-landscape", ""),
        };
        let rho = (1.0 - config.perturbation).clamp(0.0, 1.0);
        let trace = search::warm_search(&session, &mut memory, &ref_key, rho, &mut |_| {})?;
        let search_only = trace.best.reward;

        // Stage two: reflective refinement from the search winner.
        let start =
            crate::strategy::compose_combo(&pool, &task.initial_prompt, &trace.best.combo, None)
                .map_err(SearchError::Strategy)?;
        let optimizer = ablation_optimizer(trial_seed(config.seed, trial, 15));
        let refine_session = RefineSession {
            task: &task,
            data: &validation,
            inference: &handle,
            optimizer: &optimizer,
            config: &config.refine,
            templates: ReflectionTemplates::builtin(),
        };
        let run = refine::run_refinement(&refine_session, &start, &mut |_: &EvalResult| {})?;
        let full = run.best_accuracy;

        rows.push(AblationRow {
            trial,
            baseline,
            search_only,
            full,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(AblationReport {
        mean_baseline: rows.iter().map(|r| r.baseline).sum::<f64>() / n,
        mean_search_only: rows.iter().map(|r| r.search_only).sum::<f64>() / n,
        mean_full: rows.iter().map(|r| r.full).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate_prompt;
    use crate::strategy::compose_combo;

    fn combo(landscape: &Landscape, ids: &[usize]) -> StrategyCombo {
        let all = landscape.strategy_ids();
        StrategyCombo::new(ids.iter().map(|&i| all[i].clone()).collect()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let params = LandscapeParams::default();
        let a = Landscape::generate(&params, 7);
        let b = Landscape::generate(&params, 7);
        let c = Landscape::generate(&params, 8);
        let probe = combo(&a, &[0, 3]);
        assert_eq!(a.reward(&probe), b.reward(&probe));
        assert!(a.oracle() == b.oracle());
        // Different seeds: different landscape (on some probe).
        let differs = (0..8).any(|i| {
            let p = combo(&a, &[i]);
            a.reward(&p) != c.reward(&p)
        });
        assert!(differs);
    }

    #[test]
    fn rewards_live_on_the_accuracy_grid() {
        let params = LandscapeParams::default();
        let landscape = Landscape::generate(&params, 3);
        for c in search::enumerate_combos(&landscape.marker_pool(), 2) {
            let r = landscape.reward(&c);
            let scaled = r * params.dataset_size as f64;
            assert!(
                (scaled - scaled.round()).abs() < 1e-9,
                "off-grid reward {r}"
            );
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn measured_accuracy_equals_reward_exactly() {
        let params = LandscapeParams::default();
        let landscape = Arc::new(Landscape::generate(&params, 21));
        let pool = landscape.marker_pool();
        let task = synthetic_task("oracle-alignment");
        let data = synthetic_dataset(&task, params.dataset_size, SplitTag::Train);
        let handle = landscape_handle(&landscape, 0);
        for ids in [vec![], vec![2], vec![5, 1], vec![1, 5]] {
            let c = combo(&landscape, &ids);
            let candidate = compose_combo(&pool, &task.initial_prompt, &c, None).unwrap();
            let eval = evaluate_prompt(&candidate, &data, &task, &handle).unwrap();
            assert_eq!(
                eval.accuracy,
                landscape.reward(&c),
                "accuracy and reward must agree bit for bit for {c}"
            );
        }
    }

    #[test]
    fn order_contributes_to_reward() {
        let params = LandscapeParams::default();
        // Order bonuses are strictly positive almost surely, so some pair
        // must differ both ways.
        let landscape = Landscape::generate(&params, 5);
        let ab = landscape.raw_reward(&[0, 1]);
        let ba = landscape.raw_reward(&[1, 0]);
        assert_ne!(ab, ba);
    }

    #[test]
    fn prompt_markers_round_trip() {
        let params = LandscapeParams {
            refine_bonus: 0.25,
            ..LandscapeParams::default()
        };
        let landscape = Landscape::generate(&params, 9);
        let pool = landscape.marker_pool();
        let c = combo(&landscape, &[4, 0]);
        let candidate = compose_combo(&pool, "Base prompt.", &c, None).unwrap();
        assert_eq!(
            landscape.reward_for_prompt(&candidate.text),
            landscape.reward(&c)
        );
        // Unknown or duplicate markers are ignored.
        let messy = format!("{} [strategy:s4] [strategy:s99]", candidate.text);
        assert_eq!(landscape.reward_for_prompt(&messy), landscape.reward(&c));
        // The refinement marker adds the bonus.
        let refined = format!("{} {REFINE_MARKER}", candidate.text);
        assert_eq!(
            landscape.reward_for_prompt(&refined),
            landscape.quantize(landscape.raw_reward(&[4, 0]) + 0.25)
        );
    }

    #[test]
    fn oracle_is_the_argmax() {
        let landscape = Landscape::generate(&LandscapeParams::default(), 13);
        let (best_combo, best_reward) = landscape.oracle();
        assert_eq!(landscape.reward(&best_combo), best_reward);
        for c in search::enumerate_combos(&landscape.marker_pool(), 2) {
            assert!(landscape.reward(&c) <= best_reward);
        }
    }

    fn small_bench_config() -> BenchConfig {
        BenchConfig {
            trials: 5,
            seed: 42,
            landscape: LandscapeParams {
                pool_size: 4,
                dataset_size: 40,
                ..LandscapeParams::default()
            },
            search: SearchConfig {
                budget: 10,
                ..SearchConfig::default()
            },
            perturbation: 0.02,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn comparison_report_shape_and_invariants() {
        let config = small_bench_config();
        let report = run_comparison(&config).unwrap();
        assert_eq!(report.rows.len(), 10);
        assert_eq!(report.summaries.len(), 2);
        let action_space = 1 + 4 + 4 * 3;
        for row in &report.rows {
            assert!(row.regret >= 0.0, "noiseless regret must be non-negative");
            if row.method == "cold_exhaustive" {
                assert_eq!(row.evaluations, action_space);
                assert_eq!(row.regret, 0.0);
            } else {
                assert!(row.evaluations <= config.search.budget);
            }
        }
        assert_eq!(
            report.fraction_within(BenchMethod::ColdExhaustive, 0.0),
            1.0
        );

        // The whole report is deterministic.
        let again = run_comparison(&config).unwrap();
        assert_eq!(report.rows, again.rows);
    }

    #[test]
    fn ablation_orders_stage_means() {
        let config = AblationConfig {
            trials: 4,
            seed: 9,
            landscape: LandscapeParams {
                pool_size: 4,
                dataset_size: 40,
                refine_bonus: 0.1,
                ..LandscapeParams::default()
            },
            search: SearchConfig {
                budget: 10,
                ..SearchConfig::default()
            },
            perturbation: 0.02,
            refine: RefineConfig {
                max_iterations: 1,
                ..RefineConfig::default()
            },
        };
        let report = run_two_stage_ablation(&config).unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            assert!(
                row.full >= row.search_only,
                "refinement keeps its starting point (trial {})",
                row.trial
            );
        }
        assert!(report.mean_full >= report.mean_search_only);
        assert!(report.mean_search_only >= report.mean_baseline);
    }
}
