//! Prompt rendering plus a cache-aware front end over embedding and chat providers.
//!
//! Every request goes through [`Gateway`], which consults the on-disk
//! [`ResponseCache`] first, retries failed remote calls with exponential backoff and
//! bounds the number of concurrent requests.

pub mod cache;
pub mod prompts;
pub mod remote;
pub mod stub;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::ResponseCache;
pub use prompts::{build_item_prompt, build_overall_prompt, build_subsequence_prompt, ItemPrompt, PromptTemplates};
pub use stub::{StubEmbedder, StubMode, StubSummarizer};

/// `(input index, provider result)` from one embedding worker.
type Fetched = (usize, Result<Vec<f32>, ProviderError>);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("empty completion")]
    EmptyCompletion,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("item {0} has no title")]
    MissingTitle(String),
    #[error("empty {0}")]
    EmptyPromptInput(&'static str),
    #[error("embedding failed for {} inputs (indices {indices:?}): {reason}", indices.len())]
    EmbeddingFailed { indices: Vec<usize>, reason: String },
    #[error("completion failed after retries: {0}")]
    CompletionFailed(String),
    #[error("provider {provider} returned dimension {got} for input {index}, expected {expected}")]
    DimensionDrift { provider: String, expected: usize, got: usize, index: usize },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    /// `None` when the dimension is only known after the first response.
    fn dim(&self) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError>;
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseKind {
    Embedding,
    Completion,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Embedding(Vec<f32>),
    Completion(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderResponse {
    pub payload: Payload,
    pub provider_id: String,
    pub cached: bool,
}

impl ProviderResponse {
    pub fn kind(&self) -> ResponseKind {
        match self.payload {
            Payload::Embedding(_) => ResponseKind::Embedding,
            Payload::Completion(_) => ResponseKind::Completion,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.payload {
            Payload::Completion(t) => Some(t),
            Payload::Embedding(_) => None,
        }
    }
}

/// Row-major `[n × dim]` embeddings with per-row cache flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
    pub cached: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut f: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut last = ProviderError::Transport("no attempts made".into());
        for attempt in 0..self.attempts.max(1) {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::debug!("provider attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < self.attempts {
                        std::thread::sleep(Duration::from_millis(self.base_backoff_ms << attempt));
                    }
                }
            }
        }
        Err(last)
    }
}

#[derive(Debug, Default)]
pub struct CallStats {
    embed_calls: AtomicUsize,
    chat_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl CallStats {
    /// Provider invocations that were not served from cache (every retry attempt counts).
    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::Relaxed)
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Stub,
    Remote,
}

/// `provider.*` configuration keys. Credentials and base URL come from the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    pub stub_mode: StubMode,
    pub embedding_model: String,
    pub chat_model: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            dim: 64,
            seed: 0,
            stub_mode: StubMode::Text,
            embedding_model: "text-embedding-ada-002".into(),
            chat_model: "gpt-3.5-turbo".into(),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct Gateway {
    embedder: Arc<dyn EmbeddingProvider>,
    chat: Arc<dyn ChatProvider>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    max_in_flight: usize,
    observed_dim: Mutex<Option<usize>>,
    stats: CallStats,
}

impl Gateway {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>, chat: Arc<dyn ChatProvider>, cache: Option<ResponseCache>) -> Self {
        Self {
            embedder,
            chat,
            cache,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            observed_dim: Mutex::new(None),
            stats: CallStats::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn from_config(cfg: &ProviderConfig, cache_dir: Option<PathBuf>) -> Result<Self, GatewayError> {
        let (embedder, chat): (Arc<dyn EmbeddingProvider>, Arc<dyn ChatProvider>) = match cfg.kind {
            ProviderKind::Stub => {
                if cfg.dim == 0 {
                    return Err(GatewayError::Config("provider.dim must be positive".into()));
                }
                (Arc::new(StubEmbedder::new(cfg.seed, cfg.dim, cfg.stub_mode)), Arc::new(StubSummarizer))
            }
            ProviderKind::Remote => {
                let settings = remote::RemoteSettings::from_env();
                if settings.api_key.is_none() {
                    return Err(GatewayError::Config(format!("{} is not set", remote::API_KEY_ENV)));
                }
                let dim = (cfg.dim > 0).then_some(cfg.dim);
                (
                    Arc::new(remote::RemoteEmbedder::new(settings.clone(), &cfg.embedding_model, dim)),
                    Arc::new(remote::RemoteChat::new(settings, &cfg.chat_model)),
                )
            }
        };
        Ok(Self::new(embedder, chat, cache_dir.map(ResponseCache::new)).with_retry(cfg.retry).with_max_in_flight(cfg.max_in_flight))
    }

    pub fn embedding_provider_id(&self) -> &str {
        self.embedder.id()
    }

    pub fn chat_provider_id(&self) -> &str {
        self.chat.id()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn stats(&self) -> &CallStats {
        &self.stats
    }

    /// Embedding dimension, if known yet.
    pub fn dim(&self) -> Option<usize> {
        self.embedder.dim().or(*self.observed_dim.lock().expect("dim lock"))
    }

    fn check_dim(&self, got: usize, index: usize) -> Result<(), GatewayError> {
        let mut observed = self.observed_dim.lock().expect("dim lock");
        let expected = self.embedder.dim().or(*observed).unwrap_or(got);
        if got != expected {
            return Err(GatewayError::DimensionDrift { provider: self.embedder.id().to_string(), expected, got, index });
        }
        *observed = Some(expected);
        Ok(())
    }

    pub fn embed_one(&self, text: &str) -> Result<ProviderResponse, GatewayError> {
        let e = self.embed_texts(&[text])?;
        Ok(ProviderResponse {
            payload: Payload::Embedding(e.rows.into_iter().next().expect("one row")),
            provider_id: self.embedder.id().to_string(),
            cached: e.cached[0],
        })
    }

    /// Row `i` is the embedding of `texts[i]`. Cache hits never reach the provider.
    pub fn embed_texts<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Embeddings, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyPromptInput("embedding input"));
        }
        let pid = self.embedder.id();
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut cached = vec![false; texts.len()];
        let mut misses = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            match self.cache.as_ref().and_then(|c| c.get_embedding(pid, t.as_ref())) {
                Some(v) => {
                    self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                    rows[i] = Some(v);
                    cached[i] = true;
                }
                None => misses.push(i),
            }
        }

        let fetched: Mutex<Vec<Fetched>> = Mutex::new(Vec::with_capacity(misses.len()));
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(misses.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = misses.get(k) else { break };
                    let r = self.retry.run(|| {
                        self.stats.embed_calls.fetch_add(1, Ordering::Relaxed);
                        self.embedder.embed(texts[i].as_ref())
                    });
                    fetched.lock().expect("fetch lock").push((i, r));
                });
            }
        });

        let mut fetched = fetched.into_inner().expect("fetch lock");
        fetched.sort_by_key(|(i, _)| *i);
        let mut failed = Vec::new();
        let mut reason = String::new();
        for (i, r) in fetched {
            match r {
                Ok(v) => {
                    if let Some(c) = &self.cache {
                        c.put_embedding(pid, texts[i].as_ref(), &v)?;
                    }
                    rows[i] = Some(v);
                }
                Err(e) => {
                    failed.push(i);
                    reason = e.to_string();
                }
            }
        }
        if !failed.is_empty() {
            return Err(GatewayError::EmbeddingFailed { indices: failed, reason });
        }
        let rows: Vec<Vec<f32>> = rows.into_iter().map(|r| r.expect("every row resolved")).collect();
        for (i, r) in rows.iter().enumerate() {
            self.check_dim(r.len(), i)?;
        }
        Ok(Embeddings { dim: rows[0].len(), rows, cached })
    }

    pub fn summarize(&self, prompt: &str) -> Result<ProviderResponse, GatewayError> {
        let pid = self.chat.id();
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get_completion(pid, prompt)) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ProviderResponse { payload: Payload::Completion(text), provider_id: pid.to_string(), cached: true });
        }
        let text = self
            .retry
            .run(|| {
                self.stats.chat_calls.fetch_add(1, Ordering::Relaxed);
                let t = self.chat.complete(prompt)?;
                if t.trim().is_empty() {
                    Err(ProviderError::EmptyCompletion)
                } else {
                    Ok(t)
                }
            })
            .map_err(|e| GatewayError::CompletionFailed(e.to_string()))?;
        if let Some(c) = &self.cache {
            c.put_completion(pid, prompt, &text)?;
        }
        Ok(ProviderResponse { payload: Payload::Completion(text), provider_id: pid.to_string(), cached: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn stub_gateway(dir: &std::path::Path) -> Gateway {
        Gateway::new(Arc::new(StubEmbedder::new(0, 64, StubMode::Text)), Arc::new(StubSummarizer), Some(ResponseCache::new(dir)))
    }

    #[test]
    fn identical_texts_yield_identical_rows() {
        let dir = tempfile::tempdir().unwrap();
        let gw = stub_gateway(dir.path());
        let e = gw.embed_texts(&["abc", "abc"]).unwrap();
        assert_eq!(e.rows[0], e.rows[1]);
        assert_eq!(e.dim, 64);
        for r in &e.rows {
            let n: f64 = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cached_text_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let gw = stub_gateway(dir.path());
        let first = gw.embed_one("hello").unwrap();
        assert!(!first.cached);
        let calls = gw.stats().embed_calls();
        let second = gw.embed_one("hello").unwrap();
        assert!(second.cached);
        assert_eq!(gw.stats().embed_calls(), calls);
        assert_eq!(first.payload, second.payload);
    }

    #[test]
    fn summaries_are_cached_by_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let gw = stub_gateway(dir.path());
        let p = build_subsequence_prompt(&["T1", "T2"]).unwrap();
        let a = gw.summarize(&p).unwrap();
        let b = gw.summarize(&p).unwrap();
        assert_eq!(a.text(), Some("Prefers: T1; T2"));
        assert!(!a.cached && b.cached);
        assert_eq!(a.payload, b.payload);
        assert_eq!(gw.stats().chat_calls(), 1);
    }

    #[test]
    fn distinct_prompts_get_distinct_keys() {
        let keys: HashSet<String> = (0..100)
            .map(|i| build_subsequence_prompt(&[format!("title {i}")]).unwrap())
            .map(|p| cache::cache_key("stub-chat", &p))
            .collect();
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn changing_provider_invalidates_hits() {
        let dir = tempfile::tempdir().unwrap();
        let gw = stub_gateway(dir.path());
        gw.embed_one("x").unwrap();
        let other = Gateway::new(
            Arc::new(StubEmbedder::new(1, 64, StubMode::Text)),
            Arc::new(StubSummarizer),
            Some(ResponseCache::new(dir.path())),
        );
        assert!(!other.embed_one("x").unwrap().cached);
    }

    struct Flaky {
        fail_first: usize,
        calls: AtomicUsize,
        dims: Vec<usize>,
    }

    impl EmbeddingProvider for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn dim(&self) -> Option<usize> {
            None
        }
        fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first || text == "never" {
                return Err(ProviderError::Transport("boom".into()));
            }
            let d = self.dims[text.len() % self.dims.len()];
            Ok(vec![0.5; d])
        }
    }

    fn flaky(fail_first: usize, dims: Vec<usize>) -> Gateway {
        Gateway::new(Arc::new(Flaky { fail_first, calls: AtomicUsize::new(0), dims }), Arc::new(StubSummarizer), None)
            .with_retry(RetryPolicy { attempts: 3, base_backoff_ms: 1 })
            .with_max_in_flight(1)
    }

    #[test]
    fn transient_failures_are_retried() {
        let gw = flaky(2, vec![4]);
        let e = gw.embed_texts(&["a"]).unwrap();
        assert_eq!(e.rows[0].len(), 4);
        assert_eq!(gw.stats().embed_calls(), 3);
    }

    #[test]
    fn persistent_failures_report_indices() {
        let gw = flaky(0, vec![4]);
        match gw.embed_texts(&["a", "never", "b", "never"]) {
            Err(GatewayError::EmbeddingFailed { indices, .. }) => assert_eq!(indices, vec![1, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_drift_is_fatal() {
        let gw = flaky(0, vec![4, 5]);
        assert!(matches!(gw.embed_texts(&["a", "bb"]), Err(GatewayError::DimensionDrift { .. })));
    }

    struct Silent;
    impl ChatProvider for Silent {
        fn id(&self) -> &str {
            "silent"
        }
        fn complete(&self, _: &str) -> Result<String, ProviderError> {
            Ok("   ".into())
        }
    }

    #[test]
    fn empty_completion_is_retried_then_fails() {
        let gw = Gateway::new(Arc::new(StubEmbedder::new(0, 8, StubMode::Text)), Arc::new(Silent), None)
            .with_retry(RetryPolicy { attempts: 3, base_backoff_ms: 0 });
        assert!(matches!(gw.summarize("p"), Err(GatewayError::CompletionFailed(_))));
        assert_eq!(gw.stats().chat_calls(), 3);
    }
}
