//! OpenAI-compatible HTTP chat backend with bounded retries.
//!
//! The transport layer is a small trait so tests can script status codes
//! and inspect request bodies without a server. Rate limits (429) and
//! server errors (5xx) are retried with exponential backoff, honoring
//! `Retry-After` when present; client errors fail fast.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use crate::backend::{
    BackendError, BackendKind, ChatRole, CompletionRequest, CompletionResult, ModelBackend,
    TokenUsage,
};
use crate::task::{MediaKind, MediaRef};

/// Environment variable holding the API key for HTTP backends.
pub const API_KEY_ENV: &str = "PROMPTSMITH_API_KEY";

/// Retry/backoff settings for one backend.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt, so `max_retries + 1` attempts total.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    fn backoff_ms(&self, attempt: u32) -> u64 {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        exp.min(self.max_delay_ms)
    }
}

/// One raw HTTP response, reduced to what retry classification needs.
#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after_ms: Option<u64>,
}

/// The wire layer under [`HttpBackend`]: post a chat request, fetch media
/// bytes. Production uses a blocking reqwest client; tests use scripts.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<HttpReply, BackendError>;
    fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, BackendError>;
}

struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport {
                status: 0,
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<HttpReply, BackendError> {
        let response = self
            .client
            .post(url)
            .bearer_auth(api_key)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport {
                status: 0,
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        let retry_after_ms = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|secs| secs * 1000);
        let body = response.text().map_err(|e| BackendError::Transport {
            status,
            message: e.to_string(),
        })?;
        Ok(HttpReply {
            status,
            body,
            retry_after_ms,
        })
    }

    fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, BackendError> {
        let response = self
            .client
            .get(url)
            .send()
            .map_err(|e| BackendError::Media {
                payload: url.to_string(),
                reason: e.to_string(),
            })?;
        if !response.status().is_success() {
            return Err(BackendError::Media {
                payload: url.to_string(),
                reason: format!("fetch failed with status {}", response.status()),
            });
        }
        response
            .bytes()
            .map(|b| b.to_vec())
            .map_err(|e| BackendError::Media {
                payload: url.to_string(),
                reason: e.to_string(),
            })
    }
}

fn guess_mime(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        _ => "image/jpeg",
    }
}

/// The live chat-completions backend.
pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
    transport: Arc<dyn HttpTransport>,
}

impl HttpBackend {
    /// Builds a backend for `endpoint`; fails with [`BackendError::AuthMissing`]
    /// before any network traffic if no key is available.
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        let api_key = match api_key {
            Some(k) if !k.trim().is_empty() => k,
            _ => return Err(BackendError::AuthMissing),
        };
        Ok(HttpBackend {
            endpoint: endpoint.into(),
            api_key,
            retry,
            transport: Arc::new(ReqwestTransport::new()?),
        })
    }

    /// Builds a backend with the key from `PROMPTSMITH_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, retry: RetryPolicy) -> Result<Self, BackendError> {
        HttpBackend::new(endpoint, std::env::var(API_KEY_ENV).ok(), retry)
    }

    /// Test constructor with an injected transport.
    pub fn with_transport(
        endpoint: impl Into<String>,
        api_key: impl Into<String>,
        retry: RetryPolicy,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            retry,
            transport,
        }
    }

    /// Turns a media reference into a data URL the chat API accepts,
    /// fetching files and remote URLs as needed.
    fn media_to_data_url(&self, media: &MediaRef) -> Result<String, BackendError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        match media.kind {
            MediaKind::Base64 => {
                if media.payload.starts_with("data:") {
                    Ok(media.payload.clone())
                } else {
                    Ok(format!("data:image/jpeg;base64,{}", media.payload))
                }
            }
            MediaKind::Path => {
                let bytes = std::fs::read(&media.payload).map_err(|e| BackendError::Media {
                    payload: media.payload.clone(),
                    reason: e.to_string(),
                })?;
                Ok(format!(
                    "data:{};base64,{}",
                    guess_mime(&media.payload),
                    b64.encode(bytes)
                ))
            }
            MediaKind::Url => {
                if media.payload.starts_with("data:") {
                    return Ok(media.payload.clone());
                }
                let bytes = self.transport.fetch_bytes(&media.payload)?;
                Ok(format!(
                    "data:{};base64,{}",
                    guess_mime(&media.payload),
                    b64.encode(bytes)
                ))
            }
        }
    }

    fn build_body(&self, request: &CompletionRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::new();
        for m in &request.messages {
            let role = match m.role {
                ChatRole::System => "system",
                ChatRole::User => "user",
            };
            let content = if m.media.is_empty() {
                Value::String(m.text.clone())
            } else {
                let mut parts = vec![json!({"type": "text", "text": m.text})];
                for media in &m.media {
                    let url = self.media_to_data_url(media)?;
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                Value::Array(parts)
            };
            messages.push(json!({"role": role, "content": content}));
        }
        let mut body = json!({
            "model": request.model.model_id,
            "messages": messages,
            "temperature": request.model.temperature,
            "max_tokens": request.model.max_output_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn parse_reply(body: &str) -> Result<(String, TokenUsage), BackendError> {
        let v: Value = serde_json::from_str(body)
            .map_err(|e| BackendError::MalformedResponse(format!("invalid json: {e}")))?;
        let content = &v["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
            _ => {
                return Err(BackendError::MalformedResponse(
                    "no choices[0].message.content in response".into(),
                ))
            }
        };
        let usage = TokenUsage {
            input_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            output_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok((text, usage))
    }
}

impl ModelBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let body = self.build_body(request)?;
        let mut last_error: Option<BackendError> = None;
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                let delay = match &last_error {
                    Some(BackendError::RateLimited {
                        retry_after_ms: Some(ms),
                    }) => *ms,
                    _ => self.retry.backoff_ms(attempt - 1),
                };
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
            let started = Instant::now();
            match self
                .transport
                .post_json(&self.endpoint, &self.api_key, &body)
            {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (text, usage) = Self::parse_reply(&reply.body)?;
                    return Ok(CompletionResult {
                        text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend_kind: BackendKind::Http,
                        retries: attempt,
                    });
                }
                Ok(reply) if reply.status == 429 => {
                    last_error = Some(BackendError::RateLimited {
                        retry_after_ms: reply.retry_after_ms,
                    });
                }
                Ok(reply) if (500..600).contains(&reply.status) => {
                    last_error = Some(BackendError::Transport {
                        status: reply.status,
                        message: truncate(&reply.body, 200),
                    });
                }
                Ok(reply) => {
                    // Client errors are not retryable.
                    return Err(BackendError::Transport {
                        status: reply.status,
                        message: truncate(&reply.body, 200),
                    });
                }
                Err(BackendError::Transport { status: 0, message }) => {
                    // Connection-level failure: worth retrying.
                    last_error = Some(BackendError::Transport { status: 0, message });
                }
                Err(other) => return Err(other),
            }
        }
        Err(BackendError::RetriesExhausted {
            attempts: self.retry.max_retries + 1,
            last: last_error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "unknown".into()),
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}
