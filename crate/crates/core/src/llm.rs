//! LLM execution: backends, a deterministic mock, and a persistent response
//! cache.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::{count_demonstrations, query_section, PROMPT_VERSION};

pub const DEFAULT_MAX_TOKENS: u32 = 256;
pub const DEFAULT_API_KEY_ENV: &str = "CUP_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>, temperature: f64) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Contract(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Contract("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String>;
}

pub fn complete(req: &CompletionRequest, backend: &dyn Backend) -> Result<String> {
    req.validate()?;
    backend.complete(req)
}

/// Matches on the rendered prompt; every `Some` field must hold. `shots`
/// counts demonstration sections and `query_contains` searches only the
/// query part, so demonstrations quoting other samples never match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub query_contains: Option<String>,
    pub response: String,
}

impl MockRule {
    fn matches(&self, req: &CompletionRequest) -> bool {
        self.model_id.as_ref().is_none_or(|m| *m == req.model_id)
            && self.prompt.as_ref().is_none_or(|p| *p == req.prompt)
            && self
                .shots
                .is_none_or(|k| count_demonstrations(&req.prompt) == k)
            && self
                .query_contains
                .as_ref()
                .is_none_or(|s| query_section(&req.prompt).contains(s.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub models: Vec<String>,
    pub rules: Vec<MockRule>,
}

type Responder = dyn Fn(&CompletionRequest) -> Option<String> + Send + Sync;

/// Fixture-driven backend for tests and offline runs. Counts its calls.
pub struct MockBackend {
    fixture: MockFixture,
    responder: Option<Box<Responder>>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            fixture,
            responder: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// A mock whose replies are computed; rules in `fixture` are tried first.
    pub fn with_responder<F>(models: Vec<String>, responder: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static,
    {
        Self {
            fixture: MockFixture {
                models,
                rules: Vec::new(),
            },
            responder: Some(Box::new(responder)),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fixture = serde_json::from_str(&text)
            .map_err(|e| Error::BackendConfig(format!("{}: {e}", path.display())))?;
        Ok(Self::new(fixture))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.fixture.models.contains(&req.model_id) {
            return Err(Error::BackendConfig(format!(
                "mock backend has no model `{}`",
                req.model_id
            )));
        }
        if let Some(rule) = self.fixture.rules.iter().find(|r| r.matches(req)) {
            return Ok(rule.response.clone());
        }
        if let Some(reply) = self.responder.as_ref().and_then(|f| f(req)) {
            return Ok(reply);
        }
        Err(Error::BackendConfig(format!(
            "mock backend has no fixture for this prompt (model `{}`)",
            req.model_id
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> Option<String> {
    Some(DEFAULT_API_KEY_ENV.to_string())
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            models: Vec::new(),
            api_key_env: default_key_env(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            timeout_secs: default_timeout(),
        }
    }
}

/// Chat-completions client. The whole rendered prompt goes out as a single
/// user message.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: Option<String>,
}

enum Attempt {
    Done(Result<String>),
    Retry(Error),
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) => Some(v),
                Err(_) => {
                    return Err(Error::BackendConfig(format!(
                        "environment variable `{var}` holding the API credential is not set"
                    )))
                }
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::BackendConfig(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    fn attempt(&self, url: &str, body: &ChatRequest<'_>) -> Attempt {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        match status {
            200..=299 => Attempt::Done(parse_chat_reply(&text)),
            401 | 403 => Attempt::Done(Err(Error::Auth { status, body: text })),
            429 => Attempt::Retry(Error::RateLimited { attempts: 0 }),
            500..=599 => Attempt::Retry(Error::Transport(format!("HTTP {status}: {text}"))),
            _ => Attempt::Done(Err(Error::Transport(format!("HTTP {status}: {text}")))),
        }
    }
}

fn parse_chat_reply(text: &str) -> Result<String> {
    let reply: ChatReply =
        serde_json::from_str(text).map_err(|e| Error::MalformedReply(format!("{e}: {text}")))?;
    let content = reply
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| Error::MalformedReply(format!("no message content: {text}")))?;
    if content.is_empty() {
        return Err(Error::MalformedReply("empty message content".into()));
    }
    Ok(content)
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        if !self.config.models.is_empty() && !self.config.models.contains(&req.model_id) {
            return Err(Error::BackendConfig(format!(
                "model `{}` is not configured for {}",
                req.model_id, self.config.endpoint
            )));
        }
        let url = format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        );
        let body = ChatRequest {
            model: &req.model_id,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
        };
        let attempts = self.config.max_retries + 1;
        let mut last = Error::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&url, &body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) => {
                    log::warn!(
                        "attempt {}/{attempts} against {url} failed: {err}",
                        attempt + 1
                    );
                    last = err;
                }
            }
        }
        Err(match last {
            Error::RateLimited { .. } => Error::RateLimited { attempts },
            other => other,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest fields of a request; the cache key is the SHA-256 of their
/// canonical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDigest {
    pub model_id: String,
    pub prompt_sha256: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub prompt_version: String,
}

impl RequestDigest {
    pub fn of(req: &CompletionRequest, prompt_version: &str) -> Self {
        Self {
            model_id: req.model_id.clone(),
            prompt_sha256: sha256_hex(req.prompt.as_bytes()),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
            prompt_version: prompt_version.to_string(),
        }
    }

    pub fn key(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("digest serializes"))
    }
}

pub fn cache_key(req: &CompletionRequest, prompt_version: &str) -> String {
    RequestDigest::of(req, prompt_version).key()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    #[serde(flatten)]
    digest: RequestDigest,
    response_sha256: String,
    response: String,
}

/// Append-only on-disk response cache, one JSON record per line.
pub struct ResponseCache {
    path: PathBuf,
    prompt_version: String,
    entries: Mutex<HashMap<String, String>>,
    writer: Mutex<File>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResponseCache {
    pub const FILE_NAME: &'static str = "responses.jsonl";

    /// Opens (creating if needed) the cache in `dir`, verifying every record.
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_with_version(dir, PROMPT_VERSION)
    }

    pub fn open_with_version(dir: &Path, prompt_version: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE_NAME);
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| Error::CacheIntegrity {
                        key: format!("<line {}>", i + 1),
                        reason: e.to_string(),
                    })?;
                if rec.digest.key() != rec.key {
                    return Err(Error::CacheIntegrity {
                        key: rec.key,
                        reason: "key does not match request digest".into(),
                    });
                }
                if sha256_hex(rec.response.as_bytes()) != rec.response_sha256 {
                    return Err(Error::CacheIntegrity {
                        key: rec.key,
                        reason: "response bytes do not match stored digest".into(),
                    });
                }
                entries.insert(rec.key, rec.response);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            prompt_version: prompt_version.to_string(),
            entries: Mutex::new(entries),
            writer: Mutex::new(writer),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn key_for(&self, req: &CompletionRequest) -> String {
        cache_key(req, &self.prompt_version)
    }

    pub fn get(&self, req: &CompletionRequest) -> Option<String> {
        self.entries
            .lock()
            .unwrap()
            .get(&self.key_for(req))
            .cloned()
    }

    fn put(&self, req: &CompletionRequest, response: &str) -> Result<()> {
        let digest = RequestDigest::of(req, &self.prompt_version);
        let key = digest.key();
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        let rec = CacheRecord {
            key: key.clone(),
            digest,
            response_sha256: sha256_hex(response.as_bytes()),
            response: response.to_string(),
        };
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let mut w = self.writer.lock().unwrap();
        w.write_all(line.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        entries.insert(key, response.to_string());
        Ok(())
    }
}

pub fn cached_complete(
    req: &CompletionRequest,
    backend: &dyn Backend,
    cache: &ResponseCache,
) -> Result<String> {
    req.validate()?;
    if let Some(hit) = cache.get(req) {
        cache.hits.fetch_add(1, Ordering::SeqCst);
        return Ok(hit);
    }
    cache.misses.fetch_add(1, Ordering::SeqCst);
    let text = backend.complete(req)?;
    cache.put(req, &text)?;
    Ok(text)
}
