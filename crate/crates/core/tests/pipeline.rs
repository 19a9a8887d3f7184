//! End-to-end exercises of the public API: search, persistence, warm
//! restart, request tracing, and the reflective refinement loop working
//! together against the simulated backend.

use std::sync::Arc;

use promptsmith_core::backend::{
    CaptureSpec, ModelHandle, ModelRef, SimBackend, SimRule, SimScript, TraceLog, TraceRecord,
    TracedBackend,
};
use promptsmith_core::eval::evaluate_prompt;
use promptsmith_core::memory::{MemoryModule, StaticSimilarity};
use promptsmith_core::refine::{self, RefineConfig, RefineSession, ReflectionTemplates};
use promptsmith_core::search::{self, SearchMode};
use promptsmith_core::simbench::{
    landscape_handle, synthetic_dataset, synthetic_task, Landscape, LandscapeParams,
};
use promptsmith_core::strategy::compose_combo;
use promptsmith_core::task::SplitTag;
use promptsmith_core::{MemoryKey, SearchConfig, SearchSession};

fn small_params() -> LandscapeParams {
    LandscapeParams {
        pool_size: 4,
        dataset_size: 40,
        ..LandscapeParams::default()
    }
}

/// Cold sweep on a fresh memory, save to disk, reload in a "new process",
/// and verify the second run restarts warm from the banked rewards and
/// stays within budget.
#[test]
fn cold_run_persists_and_warm_restarts_from_disk() {
    let params = small_params();
    let landscape = Arc::new(Landscape::generate(&params, 17));
    let pool = landscape.marker_pool();
    let task = synthetic_task("pipeline-restart");
    let data = synthetic_dataset(&task, params.dataset_size, SplitTag::Train);
    let handle = landscape_handle(&landscape, 5);
    let config = SearchConfig {
        max_depth: params.max_depth,
        budget: 6,
        seed: 3,
        ..SearchConfig::default()
    };
    let key = MemoryKey::new(task.task_id.clone(), "sim-landscape", "");
    let session = SearchSession {
        task: &task,
        data: &data,
        pool: &pool,
        inference: &handle,
        optimizer: None,
        config: &config,
        key: key.clone(),
    };
    let provider = StaticSimilarity::new(0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.json");

    // First run: nothing transferable, so the search sweeps everything.
    let mut memory = MemoryModule::load_or_default(&path).unwrap();
    let cold = search::run_search(&session, &mut memory, &provider, &mut |_| {}).unwrap();
    assert_eq!(cold.mode, SearchMode::Cold);
    let action_space = 1 + 4 + 4 * 3;
    assert_eq!(cold.evaluations_used, action_space);
    let (_, oracle) = landscape.oracle();
    assert_eq!(
        cold.best.reward, oracle,
        "exhaustive sweep must find the optimum"
    );
    memory.save(&path).unwrap();

    // Second run: same task and model pair, so the banked entry is an
    // identity-similarity reference and the search starts warm.
    let mut reloaded = MemoryModule::load_or_default(&path).unwrap();
    let warm = search::run_search(&session, &mut reloaded, &provider, &mut |_| {}).unwrap();
    assert_eq!(warm.mode, SearchMode::Warm);
    assert!(warm.evaluations_used <= config.budget);
    // The prior is the exact truth, so greedy exploitation recovers the
    // optimum within the first few evaluations.
    assert_eq!(warm.best.reward, oracle);
    reloaded.save(&path).unwrap();

    // The file now reflects the warm run: the banked rewards became a
    // prior (count 0) and only freshly evaluated actions carry data again.
    let merged = MemoryModule::load(&path).unwrap();
    assert!(merged.revision() > 1);
    let banked = merged.stats(&key).unwrap();
    assert_eq!(banked.len(), action_space);
    let observed: u64 = banked.iter().map(|s| s.count).sum();
    assert_eq!(observed as usize, warm.evaluations_used);
}

/// Every model request made during an evaluation lands in the trace log as
/// one well-formed JSONL record.
#[test]
fn evaluation_requests_are_traced_to_jsonl() {
    let params = small_params();
    let landscape = Arc::new(Landscape::generate(&params, 23));
    let task = synthetic_task("pipeline-trace");
    let data = synthetic_dataset(&task, 12, SplitTag::Validation);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace_log.jsonl");
    let log = TraceLog::to_file(&path).unwrap();
    let mut model = ModelRef::inference("sim-landscape", "simulated");
    model.parallelism_limit = 1;
    let inner = Arc::new(SimBackend::new(SimScript::default(), 0).with_hook(landscape.clone()));
    let handle = ModelHandle::new(model, Arc::new(TracedBackend::new(inner, log)));

    let pool = landscape.marker_pool();
    let combos = search::enumerate_combos(&pool, 1);
    let candidate = compose_combo(&pool, &task.initial_prompt, &combos[1], None).unwrap();
    let result = evaluate_prompt(&candidate, &data, &task, &handle).unwrap();
    assert_eq!(result.records.len(), 12);

    let text = std::fs::read_to_string(&path).unwrap();
    let records: Vec<TraceRecord> = text
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect();
    assert_eq!(records.len(), 12, "one trace record per sample");
    for r in &records {
        assert_eq!(r.model_id, "sim-landscape");
        assert!(r.response.is_some());
        assert!(r.error.is_none());
        assert_eq!(r.request.len(), 1);
        assert!(r.request[0].text.contains(&candidate.text));
    }
}

/// Search hands its winner to the refinement loop; with a reward bonus on
/// refined prompts the loop must improve on the search result and report
/// the refined prompt as best.
#[test]
fn refinement_improves_on_the_search_winner() {
    let params = LandscapeParams {
        refine_bonus: 0.2,
        ..small_params()
    };
    let landscape = Arc::new(Landscape::generate(&params, 31));
    let pool = landscape.marker_pool();
    let task = synthetic_task("pipeline-two-stage");
    let train = synthetic_dataset(&task, params.dataset_size, SplitTag::Train);
    let validation = synthetic_dataset(&task, params.dataset_size, SplitTag::Validation);
    let handle = landscape_handle(&landscape, 11);

    let config = SearchConfig {
        max_depth: params.max_depth,
        ..SearchConfig::default()
    };
    let session = SearchSession {
        task: &task,
        data: &train,
        pool: &pool,
        inference: &handle,
        optimizer: None,
        config: &config,
        key: MemoryKey::new(task.task_id.clone(), "sim-landscape", ""),
    };
    let mut memory = MemoryModule::new();
    let trace = search::cold_start_search(&session, &mut memory, &mut |_| {}).unwrap();

    // Scripted optimizer: fixed diagnosis, and a rewrite that echoes the
    // current prompt with a refinement marker appended.
    let optimizer_script = SimScript {
        rules: vec![
            SimRule {
                match_substring: "Please follow this format".into(),
                response: Some(
                    r#"{"Error Causes": "ambiguous phrasing", "Improvement Methods": "spell out the labels"}"#.into(),
                ),
                answer_fraction: None,
                capture: None,
            },
            SimRule {
                match_substring: "Please provide the revised prompt directly".into(),
                response: Some("{capture} [refined]".into()),
                answer_fraction: None,
                capture: Some(CaptureSpec {
                    after: "For the current inference, my prompt is:".into(),
                    before: Some("The current analysis".into()),
                }),
            },
        ],
        default_response: None,
    };
    let optimizer = ModelHandle::new(
        ModelRef::optimizer("sim-strong", "simulated"),
        Arc::new(SimBackend::new(optimizer_script, 0)),
    );

    let start = compose_combo(&pool, &task.initial_prompt, &trace.best.combo, None).unwrap();
    let refine_config = RefineConfig {
        max_iterations: 2,
        ..RefineConfig::default()
    };
    let refine_session = RefineSession {
        task: &task,
        data: &validation,
        inference: &handle,
        optimizer: &optimizer,
        config: &refine_config,
        templates: ReflectionTemplates::builtin(),
    };
    let run = refine::run_refinement(&refine_session, &start, &mut |_| {}).unwrap();

    let expected =
        landscape.quantize(landscape.reward_for_prompt(&start.text) + params.refine_bonus);
    assert!(
        run.best_accuracy >= trace.best.reward,
        "refinement never loses ground"
    );
    if trace.best.reward < 1.0 {
        assert!(run.best_index >= 1, "the refined prompt should win");
        assert!(run.best.text.contains("[refined]"));
        assert_eq!(run.best_accuracy, expected.max(trace.best.reward));
    }
}
