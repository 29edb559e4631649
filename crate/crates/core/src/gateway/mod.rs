//! The single boundary to language-model capabilities.
//!
//! Three capabilities are exposed: deterministic generation, teacher-forced
//! continuation scoring (per-token logprobs) and text embedding. Backends
//! implement [`LmBackend`]; [`Gateway`] adds precondition checks and bounded
//! concurrent batches whose results are keyed by request id.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::num::Scalar;
use crate::promptkit::RenderedPrompt;

pub use http::HttpBackend;
pub use mock::{MockBackend, MOCK_EMBEDDING_DIMS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport failure (status {status:?}): {cause}")]
    Transport { status: Option<u16>, cause: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend refused request with status {status}: {body}")]
    BackendRefused { status: u16, body: String },
    #[error("operation unsupported by backend: {0}")]
    UnsupportedByBackend(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transport failures and timeouts are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. } | GatewayError::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

/// Which HTTP dialect the backend speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `/generate`, `/score`, `/embed` with the harness's own JSON bodies.
    #[default]
    Native,
    /// OpenAI-compatible `/completions` (echoed logprobs), `/chat/completions`, `/embeddings`.
    Openai,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    200
}
fn default_max_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub backend_kind: BackendKind,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub api_style: ApiStyle,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend_kind: BackendKind::Mock,
            base_url: String::new(),
            model_name: "mock".into(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            max_tokens: default_max_tokens(),
            api_style: ApiStyle::Native,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight < 1 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::Config("timeout_secs must be > 0".into()));
        }
        if self.backend_kind == BackendKind::Http && self.base_url.is_empty() {
            return Err(GatewayError::Config("http backend needs base_url".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// Log-probability of one token of a scored continuation (natural log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    #[serde(rename = "text")]
    pub token_text: String,
    pub logprob: f64,
}

impl TokenScore {
    pub fn new(token_text: impl Into<String>, logprob: f64) -> Self {
        Self {
            token_text: token_text.into(),
            logprob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingError {
    Empty,
    NonFinite(usize),
}

/// A dense embedding; all entries finite, `dims() == values.len() > 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

impl EmbeddingVector<f64> {
    fn from_wire(values: Vec<f64>) -> Result<Self, GatewayError> {
        Self::new(values).map_err(|e| GatewayError::Protocol(format!("bad embedding: {e:?}")))
    }
}

/// A model endpoint. Implementations must be reentrant.
pub trait LmBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn model_name(&self) -> &str;

    /// Completion with temperature 0.
    fn generate(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError>;

    /// Per-token logprobs of `continuation` given `prompt`.
    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<Vec<TokenScore>, GatewayError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, GatewayError>;
}

/// Precondition-checking, concurrency-bounded front for a backend.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LmBackend>,
    max_in_flight: usize,
    calls: Arc<AtomicU64>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.backend.model_name())
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn LmBackend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            max_in_flight: max_in_flight.max(1),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Builds an HTTP gateway from config. Mock gateways need task knowledge
    /// and are built with [`MockBackend`] directly.
    pub fn http(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend = HttpBackend::new(cfg.clone(), std::env::var("LLM_API_KEY").ok())?;
        Ok(Self::new(Arc::new(backend), cfg.max_in_flight))
    }

    pub fn backend(&self) -> &dyn LmBackend {
        self.backend.as_ref()
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    /// Number of backend calls issued so far through this gateway (and its clones).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn generate(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        if prompt.text.is_empty() && prompt.messages.iter().all(|m| m.content.is_empty()) {
            return Err(GatewayError::Precondition("empty prompt".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backend.generate(prompt)
    }

    pub fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<Vec<TokenScore>, GatewayError> {
        if continuation.is_empty() {
            return Err(GatewayError::Precondition("empty continuation".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backend.score_continuation(prompt, continuation)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::Precondition("empty text".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backend.embed(text)
    }

    /// Runs `op` over `items` with at most `max_in_flight` calls outstanding.
    ///
    /// Results come back keyed by each item's request id, so completion order
    /// never shows up in the output.
    pub fn map_concurrent<K, I, O, F>(&self, items: Vec<(K, I)>, op: F) -> BTreeMap<K, O>
    where
        K: Ord + Send,
        I: Send,
        O: Send,
        F: Fn(&Gateway, I) -> O + Sync,
    {
        let workers = self.max_in_flight.min(items.len());
        if workers <= 1 {
            return items.into_iter().map(|(k, i)| (k, op(self, i))).collect();
        }
        let queue = Mutex::new(items.into_iter());
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                let op = &op;
                s.spawn(move || loop {
                    let next = queue.lock().expect("queue lock").next();
                    let Some((k, i)) = next else { break };
                    let out = op(self, i);
                    if tx.send((k, out)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            rx.into_iter().collect()
        })
    }

    pub fn generate_many<K: Ord + Send>(
        &self,
        prompts: Vec<(K, RenderedPrompt)>,
    ) -> BTreeMap<K, Result<String, GatewayError>> {
        self.map_concurrent(prompts, |g, p| g.generate(&p))
    }

    pub fn score_many<K: Ord + Send>(
        &self,
        pairs: Vec<(K, (String, String))>,
    ) -> BTreeMap<K, Result<Vec<TokenScore>, GatewayError>> {
        self.map_concurrent(pairs, |g, (p, c)| g.score_continuation(&p, &c))
    }

    pub fn embed_many<K: Ord + Send>(
        &self,
        texts: Vec<(K, String)>,
    ) -> BTreeMap<K, Result<EmbeddingVector<f64>, GatewayError>> {
        self.map_concurrent(texts, |g, t| g.embed(&t))
    }
}
