//! Pluggable completion backends. Every source of nondeterminism in the
//! pipeline lives behind [`CompletionBackend`]: a live HTTP client for
//! OpenAI-compatible endpoints, a record/replay cassette wrapper, and a
//! scripted mock for tests. Requests carry a content digest so a cassette can
//! key recordings without storing the full request twice.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("auth error: {0}")]
    Auth(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("no recorded response for digest {0}")]
    ReplayMiss(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams { temperature: 0.0, max_tokens: 1024, stop: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub params: CompletionParams,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        CompletionRequest { messages, params: CompletionParams::default() }
    }

    /// Stable content hash over messages and params. Serde field order is
    /// declaration order, so the canonical JSON is platform-independent.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serialization is infallible");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A completion source. Implementations must be safe to call from many
/// threads at once.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

/// Scripted backend: explicit digest→response table with an optional
/// fallback function, plus a call counter for replay/offline probes.
pub struct MockBackend {
    table: Mutex<BTreeMap<String, String>>,
    fallback: Option<Box<dyn Fn(&CompletionRequest) -> String + Send + Sync>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            table: Mutex::new(BTreeMap::new()),
            fallback: None,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn with_fallback(
        fallback: impl Fn(&CompletionRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        MockBackend { fallback: Some(Box::new(fallback)), ..MockBackend::new() }
    }

    pub fn script(&self, request: &CompletionRequest, response: impl Into<String>) {
        self.table.lock().unwrap().insert(request.digest(), response.into());
    }

    pub fn script_digest(&self, digest: impl Into<String>, response: impl Into<String>) {
        self.table.lock().unwrap().insert(digest.into(), response.into());
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let digest = request.digest();
        if let Some(response) = self.table.lock().unwrap().get(&digest) {
            return Ok(response.clone());
        }
        if let Some(fallback) = &self.fallback {
            return Ok(fallback(request));
        }
        Err(BackendError::BadResponse(format!("mock has no script for digest {digest}")))
    }
}

// ---------------------------------------------------------------------------
// Cassette
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CassetteMode {
    /// Serve recorded responses; on a miss, call the inner backend and record.
    Record,
    /// Serve recorded responses only; a miss is an error.
    StrictReplay,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteEntry {
    digest: String,
    response: String,
}

/// Record/replay wrapper. The tape is JSON-lines of `{digest, response}`;
/// strict replay never touches the inner backend, so replays run offline.
pub struct CassetteBackend {
    mode: CassetteMode,
    path: PathBuf,
    entries: Mutex<BTreeMap<String, String>>,
    inner: Option<Box<dyn CompletionBackend>>,
}

impl CassetteBackend {
    pub fn record(
        path: impl Into<PathBuf>,
        inner: Box<dyn CompletionBackend>,
    ) -> Result<Self, BackendError> {
        let path = path.into();
        let entries = Self::load_tape(&path)?;
        Ok(CassetteBackend {
            mode: CassetteMode::Record,
            path,
            entries: Mutex::new(entries),
            inner: Some(inner),
        })
    }

    pub fn strict_replay(path: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let path = path.into();
        let entries = Self::load_tape(&path)?;
        Ok(CassetteBackend {
            mode: CassetteMode::StrictReplay,
            path,
            entries: Mutex::new(entries),
            inner: None,
        })
    }

    fn load_tape(path: &Path) -> Result<BTreeMap<String, String>, BackendError> {
        let mut entries = BTreeMap::new();
        if !path.exists() {
            return Ok(entries);
        }
        let file = std::fs::File::open(path).map_err(|e| BackendError::Io(e.to_string()))?;
        for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                BackendError::Io(format!("{}:{}: {e}", path.display(), line_no + 1))
            })?;
            entries.insert(entry.digest, entry.response);
        }
        Ok(entries)
    }

    fn append_entry(&self, digest: &str, response: &str) -> Result<(), BackendError> {
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| BackendError::Io(e.to_string()))?;
            }
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BackendError::Io(e.to_string()))?;
        let line = serde_json::to_string(&CassetteEntry {
            digest: digest.to_string(),
            response: response.to_string(),
        })
        .expect("entry serialization is infallible");
        writeln!(file, "{line}").map_err(|e| BackendError::Io(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CompletionBackend for CassetteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        if let Some(response) = self.entries.lock().unwrap().get(&digest) {
            return Ok(response.clone());
        }
        match self.mode {
            CassetteMode::StrictReplay => Err(BackendError::ReplayMiss(digest)),
            CassetteMode::Record => {
                let inner = self.inner.as_ref().ok_or_else(|| {
                    BackendError::Config("record-mode cassette has no inner backend".into())
                })?;
                let response = inner.complete(request)?;
                self.append_entry(&digest, &response)?;
                self.entries.lock().unwrap().insert(digest, response.clone());
                Ok(response)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

pub const ENV_API_BASE: &str = "CARTLAB_API_BASE";
pub const ENV_API_KEY: &str = "CARTLAB_API_KEY";
pub const ENV_MODEL: &str = "CARTLAB_MODEL";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub max_retries: u32,
    /// Base backoff; attempt n sleeps base × 2^n.
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Read endpoint settings from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let var = |name: &str| {
            std::env::var(name)
                .map_err(|_| BackendError::Config(format!("missing env var {name}")))
        };
        Ok(HttpConfig {
            base_url: var(ENV_API_BASE)?,
            api_key: var(ENV_API_KEY)?,
            model: var(ENV_MODEL)?,
            ..HttpConfig::local_default()
        })
    }

    pub fn local_default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:0".into(),
            api_key: String::new(),
            model: "test".into(),
            max_retries: 3,
            backoff: Duration::from_millis(200),
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlightGate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate { permits: Mutex::new(limit.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.freed.wait(permits).unwrap();
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.freed.notify_one();
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Blocking client for OpenAI-compatible chat-completion endpoints with
/// bounded retries and a concurrency cap.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let gate = InFlightGate::new(config.max_in_flight);
        Ok(HttpBackend { config, client, gate })
    }

    pub fn from_env() -> Result<Self, BackendError> {
        Self::new(HttpConfig::from_env()?)
    }

    fn post_once(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            stop: request.params.stop.clone(),
        };
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Network(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::Auth(format!("endpoint returned {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Network(format!("transient status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::BadResponse(format!("endpoint returned {status}")));
        }
        let parsed: ChatResponse =
            response.json().map_err(|e| BackendError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::BadResponse("response had no choices".into()))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.gate.acquire();
        let result = (|| {
            let mut last_err = None;
            for attempt in 0..=self.config.max_retries {
                if attempt > 0 {
                    std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
                }
                match self.post_once(request) {
                    Ok(text) => return Ok(text),
                    // Auth and malformed-response failures never heal on retry.
                    Err(err @ (BackendError::Auth(_) | BackendError::BadResponse(_))) => {
                        return Err(err);
                    }
                    Err(err) => last_err = Some(err),
                }
            }
            Err(last_err.unwrap_or_else(|| BackendError::Network("no attempts made".into())))
        })();
        self.gate.release();
        result
    }
}
