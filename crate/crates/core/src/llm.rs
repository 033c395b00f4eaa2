//! Completion providers, retry policy and the content-addressed response
//! cache.
//!
//! Cache layout: `<cache_dir>/<first 2 hex>/<digest>.json`, where `digest` is
//! the SHA-256 of the canonical JSON of `{prompt, config}` (the config
//! carries the model name). Each file stores `{prompt, config, text,
//! text_sha256, timestamp}`; a read re-derives both digests and reports
//! [`LlmError::CacheCorrupt`] on any mismatch.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::digest::sha256_hex;
use crate::prompting::Prompt;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("provider failed after {attempts} attempt(s): {last_error}")]
    ProviderExhausted { attempts: u32, last_error: String },
    #[error("provider rejected request: {0}")]
    ProviderRejected(String),
    #[error("cache entry {path} is corrupt: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("max_in_flight must be at least 1")]
    InvalidConcurrency,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model: String,
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { model: "gpt-4".into(), n: 1, temperature: 0.0, top_p: 1.0, max_tokens: 800 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidConfig("model must be set".into()));
        }
        if self.n == 0 {
            return Err(LlmError::InvalidConfig("n must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidConfig(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidConfig(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidConfig("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    prompt: &'a str,
    config: &'a GenerationConfig,
}

/// SHA-256 over the canonical JSON of `{prompt, config}`.
pub fn prompt_hash(prompt: &str, config: &GenerationConfig) -> String {
    let json = serde_json::to_vec(&KeyMaterial { prompt, config }).expect("config serializes");
    sha256_hex(json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_hash: String,
    pub config: GenerationConfig,
    pub provider_latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Error)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    /// Transport errors, rate limits and 5xx responses are worth retrying;
    /// malformed requests and auth failures are not.
    pub retryable: bool,
}

impl ProviderError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: true }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: false }
    }
}

/// Something that turns a prompt into completion text.
pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> String;

    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String, ProviderError>;
}

type Responder = dyn Fn(&str, &GenerationConfig) -> Result<String, ProviderError> + Send + Sync;

/// Offline provider. Never touches the network; counts calls.
pub struct MockProvider {
    responder: Box<Responder>,
    label: String,
    calls: AtomicUsize,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider").field("label", &self.label).field("calls", &self.calls()).finish()
    }
}

impl MockProvider {
    /// Deterministic canned text keyed by the prompt hash.
    pub fn canned() -> Self {
        Self::from_fn("mock-canned", |prompt, config| {
            Ok(format!("mock completion {}", &prompt_hash(prompt, config)[..16]))
        })
    }

    /// Returns the summary of the first in-context example of the prompt
    /// (the top-ranked retrieval for prompt-selection strategies), falling
    /// back to the canned text when the prompt has no example block.
    pub fn echo_first_example() -> Self {
        Self::from_fn("mock-echo", |prompt, config| {
            Ok(first_example_summary(prompt)
                .map(str::to_string)
                .unwrap_or_else(|| format!("mock completion {}", &prompt_hash(prompt, config)[..16])))
        })
    }

    pub fn from_fn(
        label: impl Into<String>,
        f: impl Fn(&str, &GenerationConfig) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self { responder: Box::new(f), label: label.into(), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for MockProvider {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.responder)(prompt, config)
    }
}

/// Text between the first `Summary:` line and the next blank-line-separated
/// block that starts a new dialogue or section marker.
fn first_example_summary(prompt: &str) -> Option<&str> {
    let start = prompt.find("Summary:\n")? + "Summary:\n".len();
    let rest = &prompt[start..];
    let end = ["\n\nDialogue:", "\n\nSection:"]
        .iter()
        .filter_map(|m| rest.find(m))
        .min()?;
    Some(&rest[..end])
}

/// OpenAI-compatible chat-completions endpoint. The rendered prompt is sent
/// as a single user message.
#[derive(Debug, Clone)]
pub struct HttpChatProvider {
    pub endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { endpoint: endpoint.into(), api_key, agent }
    }
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
    n: u32,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ChatChoiceMessage>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl CompletionProvider for HttpChatProvider {
    fn name(&self) -> String {
        format!("http-chat:{}", self.endpoint)
    }

    fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &config.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            n: config.n,
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                ProviderError::transient(format!("HTTP {code}"))
            }
            ureq::Error::StatusCode(code) => ProviderError::fatal(format!("HTTP {code}")),
            other => ProviderError::transient(other.to_string()),
        })?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::transient(format!("bad response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::transient("response has no choices"))?;
        choice
            .message
            .and_then(|m| m.content)
            .or(choice.text)
            .ok_or_else(|| ProviderError::transient("choice has no content"))
    }
}

/// Exponential backoff: attempt `i` (1-based) waits
/// `min(base · 2^(i-1), max)` scaled by a uniform jitter in `[0.5, 1.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 1000, max_delay_ms: 60_000, jitter: true }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, max_delay_ms: 0, jitter: false }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(30))
            .min(self.max_delay_ms);
        let scale = if self.jitter { rand::rng().random_range(0.5..1.5) } else { 1.0 };
        Duration::from_millis((exp as f64 * scale) as u64)
    }
}

/// Whether the cache is consulted and/or written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Read hits, write misses.
    #[default]
    ReadWrite,
    /// Skip reads, overwrite entries. Repairs corrupt entries.
    Refresh,
    /// Neither read nor write.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt: String,
    pub config: GenerationConfig,
    pub text: String,
    pub text_sha256: String,
    pub timestamp: String,
}

/// Content-addressed on-disk store of completions.
#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2.min(digest.len())]).join(format!("{digest}.json"))
    }

    /// Look up an entry, verifying both digests.
    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>, LlmError> {
        let path = self.path_for(digest);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: String| LlmError::CacheCorrupt { path: path.clone(), reason };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("unparseable: {e}")))?;
        let key = prompt_hash(&entry.prompt, &entry.config);
        if key != digest {
            return Err(corrupt(format!("key digest {key} does not match file name")));
        }
        if sha256_hex(&entry.text) != entry.text_sha256 {
            return Err(corrupt("text digest mismatch".into()));
        }
        Ok(Some(entry))
    }

    /// Atomically write an entry (temp file in the shard directory, then
    /// rename). Returns the entry's digest.
    pub fn put(&self, prompt: &str, config: &GenerationConfig, text: &str) -> Result<String, LlmError> {
        let digest = prompt_hash(prompt, config);
        let entry = CacheEntry {
            prompt: prompt.to_string(),
            config: config.clone(),
            text: text.to_string(),
            text_sha256: sha256_hex(text),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.path_for(&digest);
        let dir = path.parent().expect("sharded path has a parent");
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{digest}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry).expect("entry serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(digest)
    }
}

fn call_with_retry(
    provider: &dyn CompletionProvider,
    prompt: &str,
    config: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<String, LlmError> {
    let attempts = retry.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match provider.complete(prompt, config) {
            Ok(text) => return Ok(text),
            Err(e) if !e.retryable => return Err(LlmError::ProviderRejected(e.message)),
            Err(e) => {
                warn!(attempt, error = %e.message, "completion attempt failed");
                last = e.message;
                if attempt < attempts {
                    std::thread::sleep(retry.delay_for(attempt));
                }
            }
        }
    }
    Err(LlmError::ProviderExhausted { attempts, last_error: last })
}

/// Serve `prompt` from the cache or the provider.
///
/// A hit returns the stored text with `from_cache = true`; a miss calls the
/// provider with retries and persists the result.
pub fn complete_with_cache(
    provider: &dyn CompletionProvider,
    prompt: &Prompt,
    config: &GenerationConfig,
    cache: Option<&ResponseCache>,
    mode: CacheMode,
    retry: &RetryPolicy,
) -> Result<Completion, LlmError> {
    complete_text(provider, &prompt.text, config, cache, mode, retry)
}

pub fn complete_text(
    provider: &dyn CompletionProvider,
    prompt: &str,
    config: &GenerationConfig,
    cache: Option<&ResponseCache>,
    mode: CacheMode,
    retry: &RetryPolicy,
) -> Result<Completion, LlmError> {
    config.validate()?;
    let digest = prompt_hash(prompt, config);
    let cache = cache.filter(|_| mode != CacheMode::Off);
    if let (Some(cache), CacheMode::ReadWrite) = (cache, mode) {
        if let Some(entry) = cache.get(&digest)? {
            return Ok(Completion {
                text: entry.text,
                prompt_hash: digest,
                config: config.clone(),
                provider_latency_ms: 0,
                from_cache: true,
            });
        }
    }
    let started = Instant::now();
    let text = call_with_retry(provider, prompt, config, retry)?;
    let latency = started.elapsed().as_millis() as u64;
    if let Some(cache) = cache {
        cache.put(prompt, config, &text)?;
    }
    Ok(Completion { text, prompt_hash: digest, config: config.clone(), provider_latency_ms: latency, from_cache: false })
}

/// Provider, cache and policies bundled for repeated use.
#[derive(Clone)]
pub struct LlmClient {
    pub provider: Arc<dyn CompletionProvider>,
    pub cache: Option<Arc<ResponseCache>>,
    pub mode: CacheMode,
    pub retry: RetryPolicy,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn CompletionProvider>) -> Self {
        Self { provider, cache: None, mode: CacheMode::ReadWrite, retry: RetryPolicy::default() }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_mode(mut self, mode: CacheMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn complete(&self, prompt: &str, config: &GenerationConfig) -> Result<Completion, LlmError> {
        complete_text(self.provider.as_ref(), prompt, config, self.cache.as_deref(), self.mode, &self.retry)
    }

    /// See [`run_batch`].
    pub fn run_batch(
        &self,
        prompts: &[&str],
        config: &GenerationConfig,
        max_in_flight: usize,
    ) -> Result<Vec<Result<Completion, LlmError>>, LlmError> {
        if max_in_flight == 0 {
            return Err(LlmError::InvalidConcurrency);
        }
        let slots: Mutex<Vec<Option<Result<Completion, LlmError>>>> =
            Mutex::new((0..prompts.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = max_in_flight.min(prompts.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(prompt) = prompts.get(i) else { break };
                    let res = self.complete(prompt, config);
                    slots.lock().unwrap()[i] = Some(res);
                });
            }
        });
        Ok(slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|s| s.expect("every slot filled"))
            .collect())
    }
}

/// Complete every prompt with at most `max_in_flight` requests outstanding.
/// Results come back in input order; failures occupy their own slot and do
/// not abort the batch.
pub fn run_batch(
    provider: Arc<dyn CompletionProvider>,
    prompts: &[Prompt],
    config: &GenerationConfig,
    cache: Option<Arc<ResponseCache>>,
    max_in_flight: usize,
) -> Result<Vec<Result<Completion, LlmError>>, LlmError> {
    let client = LlmClient { provider, cache, mode: CacheMode::ReadWrite, retry: RetryPolicy::default() };
    let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    client.run_batch(&texts, config, max_in_flight)
}
