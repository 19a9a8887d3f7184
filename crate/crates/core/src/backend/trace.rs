//! Request tracing: wraps any backend and records every model call.
//!
//! Records go either to a JSONL file (one JSON object per line, flushed per
//! record) or to an in-memory buffer that tests can inspect. A trace write
//! failure never aborts a run; it is logged and dropped.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, BackendKind, ChatRole, CompletionRequest, CompletionResult, ModelBackend,
    ModelRole,
};

/// How many characters of a media payload are kept in a trace record.
/// Payloads (file paths, URLs, base64 blobs) can be huge; requests keep the
/// full payload, the trace only a prefix.
const MEDIA_TRACE_LIMIT: usize = 120;

/// One message as captured in the trace: full text, truncated media.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracedMessage {
    pub role: ChatRole,
    pub text: String,
    #[serde(default)]
    pub media: Vec<String>,
}

/// One model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_ms: u64,
    pub model_id: String,
    pub role: ModelRole,
    pub backend_kind: BackendKind,
    pub request: Vec<TracedMessage>,
    pub seed: Option<u64>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub retries: u32,
}

enum Sink {
    File(BufWriter<File>),
    Memory(Vec<TraceRecord>),
}

/// A shared, thread-safe trace destination.
#[derive(Clone)]
pub struct TraceLog {
    sink: Arc<Mutex<Sink>>,
}

impl TraceLog {
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(TraceLog {
            sink: Arc::new(Mutex::new(Sink::File(BufWriter::new(file)))),
        })
    }

    pub fn in_memory() -> Self {
        TraceLog {
            sink: Arc::new(Mutex::new(Sink::Memory(Vec::new()))),
        }
    }

    pub fn append(&self, record: TraceRecord) {
        let mut sink = self.sink.lock().expect("trace sink lock");
        match &mut *sink {
            Sink::Memory(records) => records.push(record),
            Sink::File(writer) => {
                let mut write = || -> std::io::Result<()> {
                    serde_json::to_writer(&mut *writer, &record).map_err(std::io::Error::other)?;
                    writer.write_all(b"\n")?;
                    writer.flush()
                };
                if let Err(e) = write() {
                    log::warn!("dropping trace record: {e}");
                }
            }
        }
    }

    /// Records captured so far (in-memory sinks only; file sinks return
    /// an empty list).
    pub fn records(&self) -> Vec<TraceRecord> {
        match &*self.sink.lock().expect("trace sink lock") {
            Sink::Memory(records) => records.clone(),
            Sink::File(_) => Vec::new(),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn capture_request(request: &CompletionRequest) -> Vec<TracedMessage> {
    request
        .messages
        .iter()
        .map(|m| TracedMessage {
            role: m.role,
            text: m.text.clone(),
            media: m
                .media
                .iter()
                .map(|media| {
                    let p = &media.payload;
                    if p.len() > MEDIA_TRACE_LIMIT {
                        let mut end = MEDIA_TRACE_LIMIT;
                        while !p.is_char_boundary(end) {
                            end -= 1;
                        }
                        format!("{}…(+{} bytes)", &p[..end], p.len() - end)
                    } else {
                        p.clone()
                    }
                })
                .collect(),
        })
        .collect()
}

/// A backend wrapper that logs every call to a [`TraceLog`].
pub struct TracedBackend {
    inner: Arc<dyn ModelBackend>,
    log: TraceLog,
}

impl TracedBackend {
    pub fn new(inner: Arc<dyn ModelBackend>, log: TraceLog) -> Self {
        TracedBackend { inner, log }
    }
}

impl ModelBackend for TracedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let outcome = self.inner.complete(request);
        let mut record = TraceRecord {
            timestamp_ms: now_ms(),
            model_id: request.model.model_id.clone(),
            role: request.model.role,
            backend_kind: self.inner.kind(),
            request: capture_request(request),
            seed: request.seed,
            response: None,
            error: None,
            input_tokens: 0,
            output_tokens: 0,
            latency_ms: 0,
            retries: 0,
        };
        match &outcome {
            Ok(result) => {
                record.response = Some(result.text.clone());
                record.input_tokens = result.usage.input_tokens;
                record.output_tokens = result.usage.output_tokens;
                record.latency_ms = result.latency_ms;
                record.retries = result.retries;
            }
            Err(err) => {
                record.error = Some(err.to_string());
                if let BackendError::RetriesExhausted { attempts, .. } = err {
                    record.retries = attempts.saturating_sub(1);
                }
            }
        }
        self.log.append(record);
        outcome
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }
}
