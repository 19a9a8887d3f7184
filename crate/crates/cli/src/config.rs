//! Run configuration: the JSON config file for `optimize`, model specs, and
//! construction of backends/handles from them.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use promptsmith_core::backend::{
    ChatRole, HttpBackend, ModelBackend, ModelRole, RetryPolicy, SimBackend, SimRule, SimScript,
    TraceLog, TracedBackend, API_KEY_ENV,
};
use promptsmith_core::memory::StaticSimilarity;
use promptsmith_core::{ModelHandle, ModelRef, RefineConfig, SearchConfig};

/// Top-level config file for `optimize`. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_file: PathBuf,
    pub data_file: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub search: SearchSpec,
    #[serde(default)]
    pub refine: RefineSpec,
    pub inference_model: ModelSpec,
    pub optimizer_model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_file: Option<PathBuf>,
    #[serde(default)]
    pub similarity: SimilaritySpec,
    /// Optional strategy pool override; defaults to the built-in pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    /// Makes every relative path in the config absolute with respect to
    /// `base` (the config file's directory).
    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.task_file);
        resolve(&mut self.data_file);
        if let Some(p) = self.memory_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.strategy_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.inference_model.script_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.optimizer_model.script_file.as_mut() {
            resolve(p);
        }
    }
}

/// Train/validation fractions for the seeded dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.5,
            validation_fraction: 0.5,
        }
    }
}

/// Search stage settings (the run seed is supplied separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub epsilon: f64,
    pub top_k: usize,
    pub max_depth: usize,
    pub budget: usize,
    pub strict_budget: bool,
}

impl Default for SearchSpec {
    fn default() -> Self {
        let base = SearchConfig::default();
        SearchSpec {
            epsilon: base.epsilon,
            top_k: base.top_k,
            max_depth: base.max_depth,
            budget: base.budget,
            strict_budget: base.strict_budget,
        }
    }
}

impl SearchSpec {
    pub fn to_config(&self, seed: u64) -> SearchConfig {
        SearchConfig {
            epsilon: self.epsilon,
            top_k: self.top_k,
            max_depth: self.max_depth,
            budget: self.budget,
            seed,
            strict_budget: self.strict_budget,
        }
    }
}

/// Refinement stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSpec {
    pub max_iterations: usize,
    pub bad_case_count: usize,
    pub excerpt_max_chars: usize,
}

impl Default for RefineSpec {
    fn default() -> Self {
        let base = RefineConfig::default();
        RefineSpec {
            max_iterations: base.max_iterations,
            bad_case_count: base.bad_case_count,
            excerpt_max_chars: base.excerpt_max_chars,
        }
    }
}

impl RefineSpec {
    pub fn to_config(&self) -> RefineConfig {
        RefineConfig {
            max_iterations: self.max_iterations,
            bad_case_count: self.bad_case_count,
            excerpt_max_chars: self.excerpt_max_chars,
        }
    }
}

/// How transferable stored experience is considered to be.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySpec {
    /// Similarity assumed for any stored pair without an override (the
    /// exact same task/model pair is always 1.0).
    pub default_rho: f64,
    pub overrides: Vec<SimilarityOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityOverride {
    pub task_id: String,
    pub model_id: String,
    pub rho: f64,
}

impl Default for SimilaritySpec {
    fn default() -> Self {
        SimilaritySpec {
            default_rho: 0.5,
            overrides: Vec::new(),
        }
    }
}

impl SimilaritySpec {
    pub fn provider(&self) -> StaticSimilarity {
        let mut provider = StaticSimilarity::new(self.default_rho);
        for o in &self.overrides {
            provider = provider.with_override(o.task_id.clone(), o.model_id.clone(), o.rho);
        }
        provider
    }
}

/// One model endpoint: either an OpenAI-compatible HTTP URL or the
/// simulated backend (`"sim"` / `"simulated"`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_role: Option<ChatRole>,
    /// Response script for simulated endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_file: Option<PathBuf>,
    /// Seed for the simulated backend; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_seed: Option<u64>,
}

impl ModelSpec {
    fn to_model_ref(&self, role: ModelRole) -> ModelRef {
        let mut model = match role {
            ModelRole::Inference => ModelRef::inference(&self.model_id, &self.endpoint),
            ModelRole::Optimizer => ModelRef::optimizer(&self.model_id, &self.endpoint),
        };
        if let Some(t) = self.temperature {
            model.temperature = t;
        }
        if let Some(m) = self.max_output_tokens {
            model.max_output_tokens = m;
        }
        if let Some(p) = self.parallelism_limit {
            model.parallelism_limit = p;
        }
        if let Some(r) = self.template_role {
            model.template_role = r;
        }
        model
    }

    /// Builds the full handle (backend, optional tracing, request seed).
    pub fn build_handle(
        &self,
        role: ModelRole,
        run_seed: u64,
        trace: Option<&TraceLog>,
    ) -> Result<ModelHandle> {
        let model = self.to_model_ref(role);
        let backend = build_backend(&model, self, run_seed)?;
        let backend = match trace {
            Some(log) => {
                Arc::new(TracedBackend::new(backend, log.clone())) as Arc<dyn ModelBackend>
            }
            None => backend,
        };
        Ok(ModelHandle::new(model, backend).with_seed(run_seed))
    }
}

/// Script used when a simulated endpoint has no script file: answer every
/// sample correctly (works on datasets carrying simulator metadata).
pub fn perfect_sim_script() -> SimScript {
    SimScript {
        rules: vec![SimRule {
            match_substring: String::new(),
            response: None,
            answer_fraction: Some(1.0),
            capture: None,
        }],
        default_response: None,
    }
}

fn build_backend(
    model: &ModelRef,
    spec: &ModelSpec,
    run_seed: u64,
) -> Result<Arc<dyn ModelBackend>> {
    if model.is_simulated() {
        let script = match &spec.script_file {
            Some(path) => SimScript::from_file(path)
                .with_context(|| format!("bad simulator script {}", path.display()))?,
            None => perfect_sim_script(),
        };
        Ok(Arc::new(SimBackend::new(
            script,
            spec.sim_seed.unwrap_or(run_seed),
        )))
    } else if model.endpoint.starts_with("http://") || model.endpoint.starts_with("https://") {
        let backend =
            HttpBackend::from_env(&model.endpoint, RetryPolicy::default()).with_context(|| {
                format!(
                    "cannot reach {} without an API key; set {API_KEY_ENV}",
                    model.endpoint
                )
            })?;
        Ok(Arc::new(backend))
    } else {
        bail!(
            "endpoint {:?} is neither \"sim\"/\"simulated\" nor an http(s) URL",
            model.endpoint
        );
    }
}

/// Default on-disk location of the reward memory when neither the config
/// nor the command line names one.
pub fn default_memory_path() -> PathBuf {
    PathBuf::from("promptsmith_memory.json")
}
