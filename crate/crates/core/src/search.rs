//! Strategy search: exhaustive cold start, budgeted epsilon-greedy warm
//! search, and the shared action-selection rule.
//!
//! The action space is every ordered combination of distinct strategies up
//! to a depth limit (including the empty combination, i.e. leave the prompt
//! alone). A cold start — nothing transferable in memory — evaluates the
//! whole space once and banks every reward. A warm start installs a
//! smoothed prior transferred from the most similar memory entry and then
//! spends a small evaluation budget: with probability epsilon it explores
//! an action outside the current top-k, otherwise it exploits a top-k
//! action, updating the memory after every evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::ModelHandle;
use crate::eval::{self, EvalError, EvalResult};
use crate::memory::{self, MemoryError, MemoryKey, MemoryModule};
use crate::strategy::{self, StrategyCombo, StrategyError, StrategyPool};
use crate::task::{Dataset, Task};

/// Knobs for both search modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Probability of exploring outside the top-k on each warm-search step.
    pub epsilon: f64,
    /// Size of the exploitation set.
    pub top_k: usize,
    /// Maximum number of strategies in one combination.
    pub max_depth: usize,
    /// Maximum prompt evaluations a warm search may spend.
    pub budget: usize,
    /// Seed for the search's random draws.
    pub seed: u64,
    /// When true, a cold start whose exhaustive sweep would exceed `budget`
    /// evaluations fails instead of running.
    pub strict_budget: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epsilon: 0.3,
            top_k: 3,
            max_depth: 2,
            budget: 15,
            seed: 0,
            strict_budget: false,
        }
    }
}

/// Why a step picked its combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenBy {
    /// Part of an exhaustive cold-start sweep.
    Cold,
    /// Drawn from the top-k (exploitation).
    Exploit,
    /// Drawn from outside the top-k (exploration).
    Explore,
}

/// One evaluated action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub evaluation_index: usize,
    pub combo: StrategyCombo,
    pub reward: f64,
    pub chosen_by: ChosenBy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Cold,
    Warm,
}

/// The winning action of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestAction {
    pub combo: StrategyCombo,
    pub reward: f64,
}

/// Everything a finished search reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub mode: SearchMode,
    pub steps: Vec<SearchStep>,
    pub best: BestAction,
    pub evaluations_used: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("strategy pool is empty")]
    EmptyPool,
    #[error("no action statistics to select from")]
    EmptyStats,
    #[error("search budget is zero")]
    BudgetExhausted,
    #[error("exhaustive sweep needs {needed} evaluations but the budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("no usable reference entry in memory")]
    NoReference,
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Consecutive duplicate selections tolerated before a warm search gives
/// up early (duplicates are served from cache and cost no budget, so
/// without this cap an all-duplicates regime would spin forever).
const DUPLICATE_SELECTION_CAP: usize = 50;

/// All ordered combinations of distinct strategies up to `max_depth`, in
/// canonical order: by length, then lexicographically by strategy id. The
/// empty combination comes first.
pub fn enumerate_combos(pool: &StrategyPool, max_depth: usize) -> Vec<StrategyCombo> {
    let mut ids = pool.ids();
    ids.sort();
    let mut out = vec![StrategyCombo::empty()];
    let mut prefix = Vec::new();
    for depth in 1..=max_depth.min(ids.len()) {
        extend_permutations(&ids, depth, &mut prefix, &mut out);
    }
    out
}

fn extend_permutations(
    ids: &[crate::strategy::StrategyId],
    depth: usize,
    prefix: &mut Vec<crate::strategy::StrategyId>,
    out: &mut Vec<StrategyCombo>,
) {
    if prefix.len() == depth {
        out.push(StrategyCombo::new(prefix.clone()).expect("permutation has no repeats"));
        return;
    }
    for id in ids {
        if prefix.contains(id) {
            continue;
        }
        prefix.push(id.clone());
        extend_permutations(ids, depth, prefix, out);
        prefix.pop();
    }
}

/// One epsilon-greedy draw over the current statistics: explore the
/// complement of the top-k with probability epsilon (when the complement
/// is non-empty), otherwise exploit a uniformly chosen top-k action.
pub fn select_action(
    stats: &[memory::ActionStats],
    config: &SearchConfig,
    rng: &mut impl Rng,
) -> Result<(StrategyCombo, ChosenBy), SearchError> {
    if stats.is_empty() {
        return Err(SearchError::EmptyStats);
    }
    let top = memory::top_k(stats, config.top_k.max(1));
    let explore_draw = rng.random::<f64>() < config.epsilon;
    let complement: Vec<&StrategyCombo> = stats
        .iter()
        .map(|s| &s.combo)
        .filter(|c| !top.contains(c))
        .collect();
    if explore_draw && !complement.is_empty() {
        let pick = rng.random_range(0..complement.len());
        Ok((complement[pick].clone(), ChosenBy::Explore))
    } else {
        let pick = rng.random_range(0..top.len());
        Ok((top[pick].clone(), ChosenBy::Exploit))
    }
}

/// Shared inputs for one search run.
pub struct SearchSession<'a> {
    pub task: &'a Task,
    pub data: &'a Dataset,
    pub pool: &'a StrategyPool,
    pub inference: &'a ModelHandle,
    pub optimizer: Option<&'a ModelHandle>,
    pub config: &'a SearchConfig,
    /// Memory entry the run reads from and writes to.
    pub key: MemoryKey,
}

impl SearchSession<'_> {
    fn evaluate_combo(
        &self,
        combo: &StrategyCombo,
        on_eval: &mut dyn FnMut(&EvalResult),
    ) -> Result<f64, SearchError> {
        let candidate =
            strategy::compose_combo(self.pool, &self.task.initial_prompt, combo, self.optimizer)?;
        let result = eval::evaluate_prompt(&candidate, self.data, self.task, self.inference)?;
        let reward = result.accuracy;
        on_eval(&result);
        Ok(reward)
    }
}

fn better(candidate: f64, incumbent: Option<f64>) -> bool {
    match incumbent {
        None => true,
        // Strict improvement only, so the earliest of tied rewards wins.
        Some(best) => candidate > best,
    }
}

/// Exhaustive sweep of the whole action space, banking every reward in
/// memory. Used when nothing transferable exists yet.
pub fn cold_start_search(
    session: &SearchSession,
    memory: &mut MemoryModule,
    on_eval: &mut dyn FnMut(&EvalResult),
) -> Result<SearchTrace, SearchError> {
    if session.pool.is_empty() {
        return Err(SearchError::EmptyPool);
    }
    let combos = enumerate_combos(session.pool, session.config.max_depth);
    if session.config.strict_budget && combos.len() > session.config.budget {
        return Err(SearchError::BudgetExceeded {
            needed: combos.len(),
            budget: session.config.budget,
        });
    }
    let mut steps = Vec::with_capacity(combos.len());
    let mut best: Option<BestAction> = None;
    for (i, combo) in combos.iter().enumerate() {
        let reward = session.evaluate_combo(combo, on_eval)?;
        memory.update(&session.key, combo, reward)?;
        if better(reward, best.as_ref().map(|b| b.reward)) {
            best = Some(BestAction {
                combo: combo.clone(),
                reward,
            });
        }
        steps.push(SearchStep {
            evaluation_index: i,
            combo: combo.clone(),
            reward,
            chosen_by: ChosenBy::Cold,
        });
    }
    let evaluations_used = steps.len();
    Ok(SearchTrace {
        mode: SearchMode::Cold,
        steps,
        best: best.expect("at least one combo was evaluated"),
        evaluations_used,
    })
}

/// Budgeted epsilon-greedy search seeded from a reference memory entry.
///
/// The reference entry's statistics are smoothed by `rho` and installed as
/// the prior for this session's own memory key; every real evaluation then
/// updates that entry. Re-selecting an already-evaluated combination costs
/// no budget (the cached reward stands).
pub fn warm_search(
    session: &SearchSession,
    memory: &mut MemoryModule,
    reference: &MemoryKey,
    rho: f64,
    on_eval: &mut dyn FnMut(&EvalResult),
) -> Result<SearchTrace, SearchError> {
    let ref_stats = memory.stats(reference).filter(|s| !s.is_empty());
    let Some(ref_stats) = ref_stats else {
        return Err(SearchError::NoReference);
    };
    let prior = memory::smooth_distribution(ref_stats, rho)?;
    memory.install_prior(&session.key, prior);
    if session.config.budget == 0 {
        return Err(SearchError::BudgetExhausted);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(session.config.seed);
    let mut steps: Vec<SearchStep> = Vec::new();
    let mut best: Option<BestAction> = None;
    let mut evaluated: Vec<StrategyCombo> = Vec::new();
    let mut duplicate_streak = 0;

    while steps.len() < session.config.budget {
        let stats = memory
            .stats(&session.key)
            .expect("prior was installed above");
        if evaluated.len() >= stats.len() {
            break; // every known action has been tried
        }
        let (combo, chosen_by) = select_action(stats, session.config, &mut rng)?;
        if evaluated.contains(&combo) {
            duplicate_streak += 1;
            if duplicate_streak >= DUPLICATE_SELECTION_CAP {
                break;
            }
            continue;
        }
        duplicate_streak = 0;
        let reward = session.evaluate_combo(&combo, on_eval)?;
        memory.update(&session.key, &combo, reward)?;
        if better(reward, best.as_ref().map(|b| b.reward)) {
            best = Some(BestAction {
                combo: combo.clone(),
                reward,
            });
        }
        steps.push(SearchStep {
            evaluation_index: steps.len(),
            combo: combo.clone(),
            reward,
            chosen_by,
        });
        evaluated.push(combo);
    }
    let evaluations_used = steps.len();
    Ok(SearchTrace {
        mode: SearchMode::Warm,
        steps,
        best: best.expect("budget > 0 guarantees at least one evaluation"),
        evaluations_used,
    })
}

/// Full search entry point: consult memory for a reference entry and run
/// warm if one exists, cold otherwise. A similarity-provider failure is
/// logged and treated as "no reference" rather than killing the run.
pub fn run_search(
    session: &SearchSession,
    memory: &mut MemoryModule,
    provider: &dyn memory::SimilarityProvider,
    on_eval: &mut dyn FnMut(&EvalResult),
) -> Result<SearchTrace, SearchError> {
    let reference = match memory.select_reference(&session.key, provider) {
        Ok(r) => r,
        Err(MemoryError::SimilarityProviderFailure(msg)) => {
            log::warn!("similarity provider failed ({msg}); falling back to cold start");
            None
        }
        Err(other) => return Err(other.into()),
    };
    match reference {
        Some((ref_key, rho)) => warm_search(session, memory, &ref_key, rho, on_eval),
        None => cold_start_search(session, memory, on_eval),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ModelHandle, ModelRef, SimBackend, SimRule, SimScript};
    use crate::memory::ActionStats;
    use crate::simbench::{synthetic_dataset, synthetic_task};
    use crate::strategy::{Strategy, StrategyMode};
    use crate::task::SplitTag;
    use std::sync::Arc;

    fn marker_pool() -> StrategyPool {
        StrategyPool::new(
            ["Good", "Bad"]
                .iter()
                .map(|name| Strategy {
                    strategy_id: (*name).into(),
                    mode: StrategyMode::Suffix,
                    template: format!("[s:{}]", name.to_lowercase()),
                })
                .collect(),
        )
        .unwrap()
    }

    /// Simulated model: perfect when the prompt carries the Good marker,
    /// coin-flip-ish otherwise.
    fn sim_handle() -> ModelHandle {
        let script = SimScript {
            rules: vec![
                SimRule {
                    match_substring: "[s:good]".into(),
                    response: None,
                    answer_fraction: Some(1.0),
                    capture: None,
                },
                SimRule {
                    match_substring: "".into(),
                    response: None,
                    answer_fraction: Some(0.5),
                    capture: None,
                },
            ],
            default_response: None,
        };
        ModelHandle::new(
            ModelRef::inference("sim-small", "simulated"),
            Arc::new(SimBackend::new(script, 0)),
        )
    }

    fn combo(ids: &[&str]) -> StrategyCombo {
        StrategyCombo::new(ids.iter().map(|s| (*s).into()).collect()).unwrap()
    }

    #[test]
    fn enumeration_count_and_order() {
        let pool = StrategyPool::new(
            ["C", "A", "B"]
                .iter()
                .map(|n| Strategy {
                    strategy_id: (*n).into(),
                    mode: StrategyMode::Suffix,
                    template: "t".into(),
                })
                .collect(),
        )
        .unwrap();
        let combos = enumerate_combos(&pool, 2);
        // 1 empty + 3 singles + 3*2 ordered pairs.
        assert_eq!(combos.len(), 10);
        assert_eq!(combos[0], StrategyCombo::empty());
        assert_eq!(combos[1], combo(&["A"]));
        assert_eq!(combos[4], combo(&["A", "B"]));
        assert_eq!(combos[9], combo(&["C", "B"]));
        // Depth 0: only the empty combo. Depth beyond pool size saturates.
        assert_eq!(enumerate_combos(&pool, 0).len(), 1);
        assert_eq!(enumerate_combos(&pool, 3).len(), 16);
        assert_eq!(enumerate_combos(&pool, 9).len(), 16);
    }

    #[test]
    fn eight_strategies_depth_two_is_sixty_five() {
        let combos = enumerate_combos(StrategyPool::builtin(), 2);
        assert_eq!(combos.len(), 65);
        // No duplicates.
        for (i, c) in combos.iter().enumerate() {
            assert!(!combos[..i].contains(c), "duplicate combo {c}");
        }
    }

    fn flat_stats(n: usize) -> Vec<ActionStats> {
        (0..n)
            .map(|i| ActionStats {
                combo: combo(&[format!("S{i}").as_str()]),
                mean_reward: i as f64 / n as f64,
                count: 1,
            })
            .collect()
    }

    #[test]
    fn epsilon_extremes() {
        let stats = flat_stats(10);
        let config = SearchConfig {
            epsilon: 0.0,
            top_k: 3,
            ..SearchConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let top = memory::top_k(&stats, 3);
        for _ in 0..200 {
            let (c, by) = select_action(&stats, &config, &mut rng).unwrap();
            assert_eq!(by, ChosenBy::Exploit);
            assert!(top.contains(&c));
        }
        let config = SearchConfig {
            epsilon: 1.0,
            top_k: 3,
            ..SearchConfig::default()
        };
        for _ in 0..200 {
            let (c, by) = select_action(&stats, &config, &mut rng).unwrap();
            assert_eq!(by, ChosenBy::Explore);
            assert!(!top.contains(&c));
        }
        // Complement empty (k >= n): epsilon=1 still exploits.
        let config = SearchConfig {
            epsilon: 1.0,
            top_k: 20,
            ..SearchConfig::default()
        };
        let (_, by) = select_action(&stats, &config, &mut rng).unwrap();
        assert_eq!(by, ChosenBy::Exploit);

        assert!(matches!(
            select_action(&[], &config, &mut rng),
            Err(SearchError::EmptyStats)
        ));
    }

    #[test]
    fn cold_start_sweeps_everything_once() {
        let task = synthetic_task("unit-cold");
        let data = synthetic_dataset(&task, 8, SplitTag::Train);
        let pool = marker_pool();
        let handle = sim_handle();
        let config = SearchConfig {
            max_depth: 1,
            ..SearchConfig::default()
        };
        let session = SearchSession {
            task: &task,
            data: &data,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &config,
            key: MemoryKey::new("unit-cold", "sim-small", ""),
        };
        let mut memory = MemoryModule::new();
        let mut evals = 0;
        let trace = cold_start_search(&session, &mut memory, &mut |_| evals += 1).unwrap();

        assert_eq!(trace.mode, SearchMode::Cold);
        assert_eq!(trace.evaluations_used, 3); // (base), [Bad], [Good]
        assert_eq!(evals, 3);
        assert_eq!(trace.best.combo, combo(&["Good"]));
        assert_eq!(trace.best.reward, 1.0);
        assert!(trace.steps.iter().all(|s| s.chosen_by == ChosenBy::Cold));
        let stats = memory.stats(&session.key).unwrap();
        assert_eq!(stats.len(), 3);
        assert!(stats.iter().all(|s| s.count == 1));

        // Determinism: a second run produces an identical trace.
        let mut memory2 = MemoryModule::new();
        let trace2 = cold_start_search(&session, &mut memory2, &mut |_| {}).unwrap();
        assert_eq!(trace, trace2);

        // Strict budget refuses an oversized sweep.
        let strict = SearchConfig {
            max_depth: 1,
            budget: 2,
            strict_budget: true,
            ..SearchConfig::default()
        };
        let session = SearchSession {
            config: &strict,
            ..session
        };
        assert!(matches!(
            cold_start_search(&session, &mut MemoryModule::new(), &mut |_| {}),
            Err(SearchError::BudgetExceeded {
                needed: 3,
                budget: 2
            })
        ));
    }

    fn seeded_memory(ref_key: &MemoryKey) -> MemoryModule {
        let mut memory = MemoryModule::new();
        for (ids, reward) in [(vec![], 0.5), (vec!["Bad"], 0.25), (vec!["Good"], 0.875)] {
            let c = StrategyCombo::new(ids.iter().map(|s: &&str| (*s).into()).collect()).unwrap();
            memory.update(ref_key, &c, reward).unwrap();
        }
        memory
    }

    #[test]
    fn warm_search_exploits_transferred_prior() {
        let task = synthetic_task("unit-warm");
        let data = synthetic_dataset(&task, 8, SplitTag::Train);
        let pool = marker_pool();
        let handle = sim_handle();
        let config = SearchConfig {
            epsilon: 0.0,
            top_k: 1,
            budget: 4,
            seed: 3,
            ..SearchConfig::default()
        };
        let ref_key = MemoryKey::new("previous-task", "sim-small", "");
        let target_key = MemoryKey::new("unit-warm", "sim-small", "");
        let session = SearchSession {
            task: &task,
            data: &data,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &config,
            key: target_key.clone(),
        };
        let mut memory = seeded_memory(&ref_key);
        let trace = warm_search(&session, &mut memory, &ref_key, 1.0, &mut |_| {}).unwrap();

        // Greedy k=1 goes straight to the transferred best action; after
        // evaluating it the same action stays on top, so every further
        // selection is a duplicate and the run stops early.
        assert_eq!(trace.mode, SearchMode::Warm);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].combo, combo(&["Good"]));
        assert_eq!(trace.steps[0].chosen_by, ChosenBy::Exploit);
        assert_eq!(trace.best.reward, 1.0);
        // The target entry now holds the prior plus one real observation.
        let stats = memory.stats(&target_key).unwrap();
        assert_eq!(stats.len(), 3);
        let good = stats.iter().find(|s| s.combo == combo(&["Good"])).unwrap();
        assert_eq!(good.count, 1);
        assert_eq!(good.mean_reward, 1.0);
    }

    #[test]
    fn warm_search_explores_with_full_epsilon() {
        let task = synthetic_task("unit-explore");
        let data = synthetic_dataset(&task, 8, SplitTag::Train);
        let pool = marker_pool();
        let handle = sim_handle();
        let config = SearchConfig {
            epsilon: 1.0,
            top_k: 1,
            budget: 2,
            seed: 11,
            ..SearchConfig::default()
        };
        let ref_key = MemoryKey::new("previous-task", "sim-small", "");
        let session = SearchSession {
            task: &task,
            data: &data,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &config,
            key: MemoryKey::new("unit-explore", "sim-small", ""),
        };
        let mut memory = seeded_memory(&ref_key);
        let trace = warm_search(&session, &mut memory, &ref_key, 1.0, &mut |_| {}).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.steps.iter().all(|s| s.chosen_by == ChosenBy::Explore));
        // With k=1 the top action (Good) is shielded from exploration.
        assert!(trace.steps.iter().all(|s| s.combo != combo(&["Good"])));
    }

    #[test]
    fn warm_search_error_cases() {
        let task = synthetic_task("unit-errors");
        let data = synthetic_dataset(&task, 4, SplitTag::Train);
        let pool = marker_pool();
        let handle = sim_handle();
        let ref_key = MemoryKey::new("previous-task", "sim-small", "");

        let zero_budget = SearchConfig {
            budget: 0,
            ..SearchConfig::default()
        };
        let session = SearchSession {
            task: &task,
            data: &data,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &zero_budget,
            key: MemoryKey::new("unit-errors", "sim-small", ""),
        };
        let mut memory = seeded_memory(&ref_key);
        assert!(matches!(
            warm_search(&session, &mut memory, &ref_key, 1.0, &mut |_| {}),
            Err(SearchError::BudgetExhausted)
        ));

        let config = SearchConfig::default();
        let session = SearchSession {
            config: &config,
            ..session
        };
        let missing = MemoryKey::new("nowhere", "sim-small", "");
        assert!(matches!(
            warm_search(
                &session,
                &mut seeded_memory(&ref_key),
                &missing,
                1.0,
                &mut |_| {}
            ),
            Err(SearchError::NoReference)
        ));
        assert!(matches!(
            warm_search(
                &session,
                &mut seeded_memory(&ref_key),
                &ref_key,
                7.0,
                &mut |_| {}
            ),
            Err(SearchError::Memory(MemoryError::InvalidRho(_)))
        ));
    }

    #[test]
    fn run_search_dispatches_on_memory_state() {
        let task = synthetic_task("unit-dispatch");
        let data = synthetic_dataset(&task, 4, SplitTag::Train);
        let pool = marker_pool();
        let handle = sim_handle();
        let config = SearchConfig {
            max_depth: 1,
            budget: 2,
            seed: 5,
            ..SearchConfig::default()
        };
        let provider = crate::memory::StaticSimilarity::new(0.5);
        let session = SearchSession {
            task: &task,
            data: &data,
            pool: &pool,
            inference: &handle,
            optimizer: None,
            config: &config,
            key: MemoryKey::new("unit-dispatch", "sim-small", ""),
        };

        // Empty memory: cold.
        let mut memory = MemoryModule::new();
        let trace = run_search(&session, &mut memory, &provider, &mut |_| {}).unwrap();
        assert_eq!(trace.mode, SearchMode::Cold);

        // Memory seeded from the cold run: warm next time.
        let trace = run_search(&session, &mut memory, &provider, &mut |_| {}).unwrap();
        assert_eq!(trace.mode, SearchMode::Warm);
        assert!(trace.evaluations_used <= config.budget);
    }
}
