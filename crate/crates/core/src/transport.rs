//! Chat-completion transports: an OpenAI-compatible HTTP client, a replay
//! store for offline reruns, and wrappers for recording and auditing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::ChatRequest;

/// Environment variable holding the endpoint API key.
pub const API_KEY_ENV: &str = "LPPA_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("replay store: {0}")]
    Replay(String),
    #[error("{0}")]
    Unsupported(String),
}

impl TransportError {
    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Http { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Something that answers a chat request with the assistant's text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;

    /// Where requests go, for audit logs ("offline" for local responders).
    fn destination(&self) -> String;
}

impl<T: ChatTransport + ?Sized> ChatTransport for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).complete(request)
    }

    fn destination(&self) -> String {
        (**self).destination()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Only ever read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_timeout_secs() -> u64 {
    120
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            timeout_secs: default_timeout_secs(),
            api_key: None,
        }
    }

    pub fn with_api_key_from_env(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty());
        self
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Client for `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut call = self.agent.post(&self.config.completions_url());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let response = call
            .send_json(self.request_body(request))
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(500).collect();
            return Err(TransportError::Http { status, body });
        }
        extract_content(&text)
    }

    fn destination(&self) -> String {
        self.config.completions_url()
    }
}

/// `choices[0].message.content` of a chat-completion response body.
pub fn extract_content(body: &str) -> Result<String, TransportError> {
    let v: Value = serde_json::from_str(body).map_err(|e| TransportError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::Protocol("missing choices[0].message.content".into()))
}

/// Stable hex key of a request: SHA-256 over its JSON form.
pub fn request_key(request: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("ChatRequest serializes");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct ReplayEntry {
    key: String,
    reply: String,
}

/// Answers from a JSONL file of `{"key", "reply"}` lines written by
/// [`RecordingTransport`].
pub struct ReplayTransport {
    path: PathBuf,
    replies: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn open(path: &Path) -> Result<Self, TransportError> {
        let file = File::open(path).map_err(|e| TransportError::Replay(format!("{}: {e}", path.display())))?;
        let mut replies = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| TransportError::Replay(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| TransportError::Replay(format!("{} line {}: {e}", path.display(), i + 1)))?;
            replies.insert(entry.key, entry.reply);
        }
        Ok(Self {
            path: path.to_path_buf(),
            replies,
        })
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let key = request_key(request);
        self.replies
            .get(&key)
            .cloned()
            .ok_or_else(|| TransportError::Replay(format!("no recorded reply for request {key}")))
    }

    fn destination(&self) -> String {
        format!("replay:{}", self.path.display())
    }
}

/// Appends every successful exchange to a replay file.
pub struct RecordingTransport<T> {
    inner: T,
    out: Mutex<File>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T, path: &Path) -> std::io::Result<Self> {
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            out: Mutex::new(out),
        })
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let reply = self.inner.complete(request)?;
        let line = serde_json::to_string(&ReplayEntry {
            key: request_key(request),
            reply: reply.clone(),
        })
        .expect("replay entry serializes");
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(out, "{line}") {
            log::warn!("could not record reply: {e}");
        }
        Ok(reply)
    }

    fn destination(&self) -> String {
        self.inner.destination()
    }
}

/// Logs destination and byte counts for every call; never message content.
pub struct AuditingTransport<T> {
    inner: T,
    calls: AtomicU64,
}

impl<T: ChatTransport> AuditingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: ChatTransport> ChatTransport for AuditingTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        let sent = request.system.len() + request.user.len();
        let result = self.inner.complete(request);
        match &result {
            Ok(reply) => log::info!(
                "call {n} -> {}: sent {sent} bytes, received {} bytes",
                self.inner.destination(),
                reply.len()
            ),
            Err(e) => log::info!(
                "call {n} -> {}: sent {sent} bytes, failed: {e}",
                self.inner.destination()
            ),
        }
        result
    }

    fn destination(&self) -> String {
        self.inner.destination()
    }
}
