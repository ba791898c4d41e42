//! Chat-style LLM/VLM access.
//!
//! Every prompt in the pipeline goes through [`ModelClient::complete`], which
//! wraps a [`ModelBackend`] (HTTP or replay) with a response cache keyed by
//! [`CanonicalRequestKey`] and a cap on in-flight requests. Cache files and
//! replay fixtures share one format, so a recorded cache directory can be
//! used directly as a replay directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable after {attempts} attempt(s): {last_error}")]
    BackendUnreachable { attempts: u32, last_error: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("no replay fixture for request {digest}")]
    ReplayMiss { digest: String },
    #[error("backend returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

impl ImagePayload {
    pub fn png(bytes: Vec<u8>) -> Self {
        ImagePayload {
            bytes,
            media_type: "image/png".into(),
        }
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelHint {
    Llm,
    Vlm,
}

impl ModelHint {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelHint::Llm => "llm",
            ModelHint::Vlm => "vlm",
        }
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub messages: Vec<Message>,
    pub images: Vec<ImagePayload>,
    pub model_hint: ModelHint,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    pub fn new(model_hint: ModelHint) -> Self {
        ModelRequest {
            messages: Vec::new(),
            images: Vec::new(),
            model_hint,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn llm() -> Self {
        Self::new(ModelHint::Llm)
    }

    pub fn vlm() -> Self {
        Self::new(ModelHint::Vlm)
    }

    pub fn system(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::System,
            text: text.into(),
        });
        self
    }

    pub fn user(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::User,
            text: text.into(),
        });
        self
    }

    pub fn image(mut self, image: ImagePayload) -> Self {
        self.images.push(image);
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("request has no messages".into()));
        }
        if !self.images.is_empty() && self.model_hint != ModelHint::Vlm {
            return Err(BackendError::InvalidRequest(
                "images are only allowed on vlm requests".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is invalid",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Human-readable digest input stored alongside recorded responses.
    pub fn summary(&self) -> RequestSummary {
        RequestSummary {
            model_hint: self.model_hint,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            messages: self.messages.clone(),
            images: self
                .images
                .iter()
                .map(|img| ImageSummary {
                    media_type: img.media_type.clone(),
                    sha256: canonical::sha256_hex(&img.bytes),
                    len: img.bytes.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub media_type: String,
    pub sha256: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub model_hint: ModelHint,
    pub temperature: f64,
    pub max_tokens: u32,
    pub messages: Vec<Message>,
    pub images: Vec<ImageSummary>,
}

/// Content hash of a canonicalized request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalRequestKey {
    pub digest: String,
}

impl fmt::Display for CanonicalRequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.digest)
    }
}

fn put_field(h: &mut Sha256, tag: &str, bytes: &[u8]) {
    h.update(tag.as_bytes());
    h.update(b":");
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// Every field is written with an explicit tag and length prefix, messages
/// and images in their given order.
pub fn canonical_key(request: &ModelRequest) -> CanonicalRequestKey {
    let mut h = Sha256::new();
    put_field(&mut h, "version", b"1");
    put_field(&mut h, "model_hint", request.model_hint.as_str().as_bytes());
    put_field(&mut h, "temperature", &request.temperature.to_bits().to_le_bytes());
    put_field(&mut h, "max_tokens", &request.max_tokens.to_le_bytes());
    put_field(&mut h, "messages", &(request.messages.len() as u64).to_le_bytes());
    for m in &request.messages {
        put_field(&mut h, "role", m.role.as_str().as_bytes());
        put_field(&mut h, "text", m.text.as_bytes());
    }
    put_field(&mut h, "images", &(request.images.len() as u64).to_le_bytes());
    for img in &request.images {
        put_field(&mut h, "media_type", img.media_type.as_bytes());
        put_field(&mut h, "bytes", &img.bytes);
    }
    CanonicalRequestKey {
        digest: hex::encode(h.finalize()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: f64,
}

/// On-disk record shared by the response cache and replay fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request_summary: RequestSummary,
    pub response_text: String,
}

pub fn fixture_path(dir: &Path, key: &CanonicalRequestKey) -> PathBuf {
    dir.join(format!("{}.json", key.digest))
}

pub trait ModelBackend: Send + Sync {
    /// Stable identifier recorded in provenance.
    fn id(&self) -> String;

    fn call(&self, request: &ModelRequest, key: &CanonicalRequestKey) -> Result<String, BackendError>;
}

/// Answers from `<digest>.json` fixture files. A missing fixture is an error.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into() }
    }
}

impl ModelBackend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn call(&self, _request: &ModelRequest, key: &CanonicalRequestKey) -> Result<String, BackendError> {
        let path = fixture_path(&self.dir, key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BackendError::ReplayMiss {
                    digest: key.digest.clone(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let record: FixtureRecord = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::InvalidResponse(format!("{}: {e}", path.display())))?;
        Ok(record.response_text)
    }
}

/// Test double and scripting hook: answers with a closure.
pub struct CallbackBackend<F> {
    id: String,
    f: F,
}

impl<F> CallbackBackend<F>
where
    F: Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        CallbackBackend { id: id.into(), f }
    }
}

impl<F> ModelBackend for CallbackBackend<F>
where
    F: Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn id(&self) -> String {
        self.id.clone()
    }

    fn call(&self, request: &ModelRequest, _key: &CanonicalRequestKey) -> Result<String, BackendError> {
        (self.f)(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): 1s, 2s, 4s, ... by default.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry as i32))
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub models: HashMap<ModelHint, String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

/// OpenAI-compatible chat-completions client. Images are sent as base64
/// data URLs attached to the last user message.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { cfg, agent }
    }

    fn model_for(&self, hint: ModelHint) -> String {
        self.cfg
            .models
            .get(&hint)
            .cloned()
            .unwrap_or_else(|| hint.as_str().to_owned())
    }

    pub fn request_body(&self, request: &ModelRequest) -> serde_json::Value {
        let last_user = request.messages.iter().rposition(|m| m.role == Role::User);
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if Some(i) == last_user && !request.images.is_empty() {
                    let mut parts = vec![serde_json::json!({"type": "text", "text": m.text})];
                    for img in &request.images {
                        parts.push(serde_json::json!({
                            "type": "image_url",
                            "image_url": {"url": img.data_url()}
                        }));
                    }
                    serde_json::json!({"role": m.role.as_str(), "content": parts})
                } else {
                    serde_json::json!({"role": m.role.as_str(), "content": m.text})
                }
            })
            .collect();
        serde_json::json!({
            "model": self.model_for(request.model_hint),
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": false,
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retryable { rate_limited: bool, error: String },
    Fatal(BackendError),
}

impl HttpBackend {
    fn attempt(&self, url: &str, body: &serde_json::Value) -> Attempt {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retryable {
                    rate_limited: false,
                    error: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => {
                let parsed: ChatCompletion = match serde_json::from_str(&text) {
                    Ok(p) => p,
                    Err(e) => return Attempt::Fatal(BackendError::InvalidResponse(e.to_string())),
                };
                match parsed.choices.into_iter().next() {
                    Some(choice) => Attempt::Done(choice.message.content.unwrap_or_default()),
                    None => Attempt::Fatal(BackendError::InvalidResponse("no choices in completion".into())),
                }
            }
            429 => Attempt::Retryable {
                rate_limited: true,
                error: "HTTP 429".into(),
            },
            500..=599 => Attempt::Retryable {
                rate_limited: false,
                error: format!("HTTP {status}: {text}"),
            },
            _ => Attempt::Fatal(BackendError::HttpStatus { status, body: text }),
        }
    }
}

impl ModelBackend for HttpBackend {
    fn id(&self) -> String {
        let mut models: Vec<_> = self.cfg.models.iter().collect();
        models.sort();
        let names: Vec<String> = models.iter().map(|(h, m)| format!("{}={m}", h.as_str())).collect();
        format!("http[{}]", names.join(","))
    }

    fn call(&self, request: &ModelRequest, _key: &CanonicalRequestKey) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = self.request_body(request);
        let attempts = self.cfg.retry.max_attempts.max(1);
        let mut last = String::new();
        let mut rate_limited = false;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.cfg.retry.backoff(attempt - 1));
            }
            match self.attempt(&url, &body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable {
                    rate_limited: rl,
                    error,
                } => {
                    tracing::warn!(attempt = attempt + 1, %error, "transient backend failure");
                    rate_limited = rl;
                    last = error;
                }
            }
        }
        if rate_limited {
            Err(BackendError::RateLimited { attempts })
        } else {
            Err(BackendError::BackendUnreachable {
                attempts,
                last_error: last,
            })
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimiter {
    cap: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(cap: usize) -> Self {
        InFlightLimiter {
            cap: cap.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.cap {
            n = self.cv.wait(n).expect("limiter lock");
        }
        *n += 1;
        InFlightGuard { limiter: self }
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter lock");
        *n -= 1;
        self.limiter.cv.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Shareable client: cache lookup, then a capped backend call, then cache write.
pub struct ModelClient {
    backend: Arc<dyn ModelBackend>,
    cache_enabled: bool,
    cache_dir: Option<PathBuf>,
    memory: Mutex<HashMap<CanonicalRequestKey, String>>,
    limiter: InFlightLimiter,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        ModelClient {
            backend,
            cache_enabled: true,
            cache_dir: None,
            memory: Mutex::new(HashMap::new()),
            limiter: InFlightLimiter::new(DEFAULT_MAX_IN_FLIGHT),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self.cache_enabled = true;
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.cache_enabled = false;
        self.cache_dir = None;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limiter = InFlightLimiter::new(cap);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    fn cache_lookup(&self, key: &CanonicalRequestKey) -> Result<Option<String>, BackendError> {
        if !self.cache_enabled {
            return Ok(None);
        }
        if let Some(text) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(text.clone()));
        }
        if let Some(dir) = &self.cache_dir {
            match fs::read(fixture_path(dir, key)) {
                Ok(bytes) => {
                    if let Ok(record) = serde_json::from_slice::<FixtureRecord>(&bytes) {
                        self.memory
                            .lock()
                            .expect("cache lock")
                            .insert(key.clone(), record.response_text.clone());
                        return Ok(Some(record.response_text));
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(None)
    }

    fn cache_store(&self, key: &CanonicalRequestKey, request: &ModelRequest, text: &str) -> Result<(), BackendError> {
        if !self.cache_enabled {
            return Ok(());
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.clone(), text.to_owned());
        if let Some(dir) = &self.cache_dir {
            let record = FixtureRecord {
                request_summary: request.summary(),
                response_text: text.to_owned(),
            };
            canonical::write_canonical(&fixture_path(dir, key), &record)?;
        }
        Ok(())
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let key = canonical_key(request);
        let start = Instant::now();
        if let Some(text) = self.cache_lookup(&key)? {
            return Ok(ModelResponse {
                text,
                backend_id: self.backend.id(),
                cached: true,
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let text = {
            let _slot = self.limiter.acquire();
            self.backend.call(request, &key)?
        };
        self.cache_store(&key, request, &text)?;
        Ok(ModelResponse {
            text,
            backend_id: self.backend.id(),
            cached: false,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Pulls the first JSON object or array out of a model reply, tolerating
/// code fences and surrounding prose.
pub fn extract_json(text: &str) -> Option<serde_json::Value> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text.trim()) {
        return Some(v);
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(start), Some(end)) = (text.find(open), text.rfind(close)) {
            if start < end {
                if let Ok(v) = serde_json::from_str(&text[start..=end]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// Sends `request`; if the reply fails `parse`, retries once with an extra
/// instruction to reply in JSON only. The second failure is returned as the
/// parse error message.
pub fn complete_structured<T>(
    client: &ModelClient,
    request: &ModelRequest,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Result<T, String>, BackendError> {
    let first = client.complete(request)?;
    match parse(&first.text) {
        Ok(v) => Ok(Ok(v)),
        Err(first_err) => {
            tracing::warn!(error = %first_err, "unparsable model reply, asking for a reformat");
            let retry = request
                .clone()
                .user("Reply only in JSON matching the requested schema, with no other text.");
            let second = client.complete(&retry)?;
            Ok(parse(&second.text).map_err(|e| format!("{e}; reply was: {}", second.text)))
        }
    }
}
