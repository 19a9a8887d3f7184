//! A deterministic, scriptable model backend for tests and offline
//! benchmarks.
//!
//! A [`SimScript`] is an ordered list of rules. Each rule matches a
//! substring of the flattened request text; the first matching rule decides
//! the response. A rule either returns a response template (with a few
//! placeholders substituted) or answers the attached sample so that a known
//! fraction of a dataset comes out correct. An optional [`AnswerHook`] lets
//! a synthetic reward landscape decide that fraction per prompt.
//!
//! The backend is a pure function of `(request, seed)`: no clocks, no
//! interior mutability, no global state.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, BackendKind, ChatRole, CompletionRequest, CompletionResult, ModelBackend,
    TokenUsage,
};

/// Decides, for a given prompt text, what fraction of samples the simulated
/// model answers correctly. Implemented by synthetic reward landscapes.
pub trait AnswerHook: Send + Sync {
    fn correct_fraction(&self, prompt_text: &str) -> f64;
}

/// Extracts a span of the request between two anchors into the `{capture}`
/// placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub after: String,
    #[serde(default)]
    pub before: Option<String>,
}

/// One scripted behavior. Exactly one of `response` / `answer_fraction`
/// must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRule {
    /// Rule fires when this substring occurs anywhere in the flattened
    /// request (empty string matches everything).
    pub match_substring: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<CaptureSpec>,
}

/// A full response script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimScript {
    #[serde(default)]
    pub rules: Vec<SimRule>,
    /// Fallback response template when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
}

impl SimScript {
    pub fn from_json_str(text: &str) -> Result<Self, BackendError> {
        let script: SimScript =
            serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("cannot read script: {e}")))?;
        Self::from_json_str(&text)
    }

    /// A script that answers every request with the same text.
    pub fn constant(response: impl Into<String>) -> Self {
        SimScript {
            rules: Vec::new(),
            default_response: Some(response.into()),
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        for (i, rule) in self.rules.iter().enumerate() {
            match (&rule.response, rule.answer_fraction) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(BackendError::Script(format!(
                        "rule {i}: exactly one of 'response' or 'answer_fraction' must be set"
                    )))
                }
            }
            if let Some(f) = rule.answer_fraction {
                if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                    return Err(BackendError::Script(format!(
                        "rule {i}: answer_fraction {f} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-sample metadata smuggled through the media payload as
/// `sim://index/total/gold/alt`. Synthetic datasets attach one of these to
/// every sample so fraction-based rules know which answer to give.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub index: usize,
    pub total: usize,
    pub gold: String,
    pub alt: String,
}

impl SampleMeta {
    pub fn payload(&self) -> String {
        format!(
            "sim://{}/{}/{}/{}",
            self.index, self.total, self.gold, self.alt
        )
    }

    pub fn parse(payload: &str) -> Option<SampleMeta> {
        let rest = payload.strip_prefix("sim://")?;
        let mut parts = rest.splitn(4, '/');
        let index = parts.next()?.parse().ok()?;
        let total = parts.next()?.parse().ok()?;
        let gold = parts.next()?.to_string();
        let alt = parts.next()?.to_string();
        Some(SampleMeta {
            index,
            total,
            gold,
            alt,
        })
    }
}

/// The deterministic scripted backend.
pub struct SimBackend {
    script: SimScript,
    seed: u64,
    hook: Option<Arc<dyn AnswerHook>>,
}

impl SimBackend {
    pub fn new(script: SimScript, seed: u64) -> Self {
        SimBackend {
            script,
            seed,
            hook: None,
        }
    }

    pub fn from_script_file(path: &Path, seed: u64) -> Result<Self, BackendError> {
        Ok(SimBackend::new(SimScript::from_file(path)?, seed))
    }

    pub fn with_hook(mut self, hook: Arc<dyn AnswerHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    /// Flattens a request into one searchable text blob: message roles,
    /// texts, and media payloads in order.
    fn flatten(request: &CompletionRequest) -> String {
        let mut out = String::new();
        for m in &request.messages {
            let role = match m.role {
                ChatRole::System => "system",
                ChatRole::User => "user",
            };
            out.push_str(role);
            out.push_str(": ");
            out.push_str(&m.text);
            out.push('\n');
            for media in &m.media {
                out.push_str("[media] ");
                out.push_str(&media.payload);
                out.push('\n');
            }
        }
        out
    }

    fn meta_of(request: &CompletionRequest) -> Option<SampleMeta> {
        request
            .messages
            .iter()
            .flat_map(|m| m.media.iter())
            .find_map(|m| SampleMeta::parse(&m.payload))
    }

    fn last_user_text(request: &CompletionRequest) -> &str {
        request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }

    fn substitute(
        &self,
        template: &str,
        request: &CompletionRequest,
        flat: &str,
        capture: Option<&CaptureSpec>,
    ) -> String {
        let captured = capture
            .and_then(|spec| {
                let start = flat.find(&spec.after)? + spec.after.len();
                let rest = &flat[start..];
                let end = match &spec.before {
                    Some(anchor) => rest.find(anchor)?,
                    None => rest.len(),
                };
                Some(rest[..end].trim().to_string())
            })
            .unwrap_or_default();
        let meta = Self::meta_of(request);
        let media = request
            .messages
            .iter()
            .flat_map(|m| m.media.iter())
            .next()
            .map(|m| m.payload.clone())
            .unwrap_or_default();
        let request_seed = request.seed.unwrap_or(self.seed);
        template
            .replace("{capture}", &captured)
            .replace("{last_user}", Self::last_user_text(request))
            .replace("{media}", &media)
            .replace(
                "{gold}",
                meta.as_ref().map(|m| m.gold.as_str()).unwrap_or(""),
            )
            .replace("{alt}", meta.as_ref().map(|m| m.alt.as_str()).unwrap_or(""))
            .replace("{seed}", &request_seed.to_string())
            .replace(
                "{hash}",
                &format!("{:016x}", fnv1a64(flat.as_bytes(), self.seed)),
            )
    }

    /// Answers so that, across a dataset of `meta.total` samples, exactly
    /// `round(fraction * total)` of them receive their gold label.
    fn answer_for_fraction(
        request: &CompletionRequest,
        fraction: f64,
    ) -> Result<String, BackendError> {
        let meta = Self::meta_of(request).ok_or_else(|| {
            BackendError::Script(
                "answer_fraction rule needs sim:// sample metadata on the request".into(),
            )
        })?;
        let correct = (fraction.clamp(0.0, 1.0) * meta.total as f64).round() as usize;
        if meta.index < correct {
            Ok(meta.gold)
        } else {
            Ok(meta.alt)
        }
    }

    fn respond(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let flat = Self::flatten(request);
        for rule in &self.script.rules {
            if !flat.contains(&rule.match_substring) {
                continue;
            }
            if let Some(fraction) = rule.answer_fraction {
                return Self::answer_for_fraction(request, fraction);
            }
            let template = rule.response.as_deref().unwrap_or_default();
            return Ok(self.substitute(template, request, &flat, rule.capture.as_ref()));
        }
        if let Some(hook) = &self.hook {
            let fraction = hook.correct_fraction(Self::last_user_text(request));
            return Self::answer_for_fraction(request, fraction);
        }
        if let Some(template) = &self.script.default_response {
            return Ok(self.substitute(template, request, &flat, None));
        }
        Err(BackendError::Script(format!(
            "no rule matched request starting with: {:.80}",
            flat.replace('\n', " ")
        )))
    }
}

/// 64-bit FNV-1a over the request text and seed; drives the `{hash}`
/// placeholder so scripted "random" outputs are reproducible.
fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl ModelBackend for SimBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let text = self.respond(request)?;
        let input_chars: usize = request.messages.iter().map(|m| m.text.len()).sum();
        Ok(CompletionResult {
            usage: TokenUsage {
                input_tokens: (input_chars / 4) as u64,
                output_tokens: (text.len() / 4) as u64,
            },
            text,
            latency_ms: 0,
            backend_kind: BackendKind::Simulated,
            retries: 0,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }
}
