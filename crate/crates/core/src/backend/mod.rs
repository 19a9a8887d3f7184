//! Model backends: shared request/response types, batched inference, an
//! OpenAI-compatible HTTP backend, a scriptable simulated backend, and
//! request tracing.
//!
//! Everything above this module talks to models through [`ModelHandle`] — a
//! model reference paired with a [`ModelBackend`] implementation — so the
//! whole engine runs unchanged against live endpoints, the deterministic
//! simulator, or hand-written test backends.

pub mod http;
pub mod sim;
pub mod trace;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::task::{MediaRef, Sample};

pub use http::{HttpBackend, HttpReply, HttpTransport, RetryPolicy, API_KEY_ENV};
pub use sim::{AnswerHook, CaptureSpec, SampleMeta, SimBackend, SimRule, SimScript};
pub use trace::{TraceLog, TraceRecord, TracedBackend};

/// What a model is used for. Inference models answer task samples;
/// optimizer models rewrite prompts and analyze errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Inference,
    Optimizer,
}

/// Message author role in a chat request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
}

fn default_max_output_tokens() -> u32 {
    1024
}

fn default_parallelism() -> usize {
    4
}

fn default_template_role() -> ChatRole {
    ChatRole::User
}

/// Identity and request parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub model_id: String,
    pub role: ModelRole,
    /// `"simulated"` or an HTTP(S) chat-completions URL.
    pub endpoint: String,
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism_limit: usize,
    /// Chat role used when a whole instruction template is sent as a single
    /// message (optimizer rewrites and reflections).
    #[serde(default = "default_template_role")]
    pub template_role: ChatRole,
}

impl ModelRef {
    /// An inference model with the conventional greedy settings
    /// (temperature 0).
    pub fn inference(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelRef {
            model_id: model_id.into(),
            role: ModelRole::Inference,
            endpoint: endpoint.into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            parallelism_limit: default_parallelism(),
            template_role: default_template_role(),
        }
    }

    /// An optimizer model with the conventional creative settings
    /// (temperature 1).
    pub fn optimizer(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelRef {
            role: ModelRole::Optimizer,
            temperature: 1.0,
            ..ModelRef::inference(model_id, endpoint)
        }
    }

    pub fn is_simulated(&self) -> bool {
        self.endpoint == "simulated" || self.endpoint == "sim"
    }
}

/// One chat message, possibly with attached media.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    #[serde(default)]
    pub media: Vec<MediaRef>,
}

impl ChatMessage {
    pub fn text(role: ChatRole, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            text: text.into(),
            media: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage::text(ChatRole::User, text)
    }
}

/// A single completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: ModelRef,
    pub messages: Vec<ChatMessage>,
    /// Passed to backends that support seeded sampling; the simulated
    /// backend folds it into its deterministic responses.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Simulated,
}

/// A successful completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub backend_kind: BackendKind,
    /// How many failed attempts preceded this response (0 = first try).
    pub retries: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("{API_KEY_ENV} is not set; an API key is required for http backends")]
    AuthMissing,
    #[error("transport error (status {status}): {message}")]
    Transport { status: u16, message: String },
    #[error("rate limited by endpoint")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("simulation script error: {0}")]
    Script(String),
    #[error("media error for '{payload}': {reason}")]
    Media { payload: String, reason: String },
    #[error("all {0} samples failed during batch inference")]
    AllSamplesFailed(usize),
}

/// Anything that can answer completion requests.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
    fn kind(&self) -> BackendKind;
}

/// A model reference bound to a backend, plus the request seed used for
/// reproducible runs. This is the unit the rest of the engine passes around.
#[derive(Clone)]
pub struct ModelHandle {
    pub model: ModelRef,
    pub backend: Arc<dyn ModelBackend>,
    pub request_seed: Option<u64>,
}

impl ModelHandle {
    pub fn new(model: ModelRef, backend: Arc<dyn ModelBackend>) -> Self {
        ModelHandle {
            model,
            backend,
            request_seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.request_seed = Some(seed);
        self
    }

    pub fn complete(&self, messages: Vec<ChatMessage>) -> Result<CompletionResult, BackendError> {
        let request = CompletionRequest {
            model: self.model.clone(),
            messages,
            seed: self.request_seed,
        };
        self.backend.complete(&request)
    }

    /// Completes and returns just the response text.
    pub fn complete_text(&self, messages: Vec<ChatMessage>) -> Result<String, BackendError> {
        Ok(self.complete(messages)?.text)
    }
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model", &self.model)
            .field("request_seed", &self.request_seed)
            .finish_non_exhaustive()
    }
}

/// Outcome of inference on one sample: either the model's text or the error
/// that sank this sample (other samples carry on).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceOutcome {
    Text(String),
    Failed(String),
}

/// Runs one prompt over a batch of samples, at most
/// `model.parallelism_limit` requests in flight at a time. Results come
/// back in sample order. Per-sample failures are recorded, not raised;
/// only the degenerate case where every sample fails is an error.
pub fn batch_infer(
    prompt_text: &str,
    samples: &[Sample],
    handle: &ModelHandle,
) -> Result<Vec<InferenceOutcome>, BackendError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let run_one = |sample: &Sample| -> InferenceOutcome {
        let message = ChatMessage {
            role: ChatRole::User,
            text: prompt_text.to_string(),
            media: sample.media.clone(),
        };
        match handle.complete(vec![message]) {
            Ok(result) => InferenceOutcome::Text(result.text),
            Err(err) => InferenceOutcome::Failed(err.to_string()),
        }
    };

    let workers = handle.model.parallelism_limit.clamp(1, samples.len());
    let outcomes: Vec<InferenceOutcome> = if workers == 1 {
        samples.iter().map(run_one).collect()
    } else {
        let slots: Mutex<Vec<Option<InferenceOutcome>>> = Mutex::new(vec![None; samples.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= samples.len() {
                        break;
                    }
                    let outcome = run_one(&samples[i]);
                    slots.lock().expect("batch slot lock")[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .expect("batch slot lock")
            .into_iter()
            .map(|o| o.expect("every slot filled"))
            .collect()
    };

    if outcomes
        .iter()
        .all(|o| matches!(o, InferenceOutcome::Failed(_)))
    {
        return Err(BackendError::AllSamplesFailed(samples.len()));
    }
    Ok(outcomes)
}
