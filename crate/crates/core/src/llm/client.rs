use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{BackendConfig, BackendRegistry, ChatBackend, WireError, WireReply};
use super::cache::{CacheEntry, ResponseCache};
use super::{CacheKey, ChatRequest, ChatResponse, FinishReason, LlmError};

/// Exponential backoff with jitter; only 429, 5xx, timeouts and dropped
/// connections are retried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`,
    /// capped, scaled by a uniform factor in [0.5, 1).
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << (retry.saturating_sub(1)).min(16))
            .min(self.max_delay);
        exp.mul_f64(0.5 + 0.5 * rand::random::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Embed,
}

/// One client call as it appears in a run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    pub key: CacheKey,
    pub cached: bool,
    pub retry_count: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub wire_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

#[derive(Default)]
struct Counters {
    wire_calls: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
}

/// Counting semaphore bounding concurrent wire calls.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClientBuilder {
    backend: Box<dyn ChatBackend>,
    endpoint: String,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
    parallelism: usize,
    max_prompt_chars: Option<usize>,
    embedding_model: String,
}

impl LlmClientBuilder {
    pub fn endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    pub fn cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn max_prompt_chars(mut self, limit: Option<usize>) -> Self {
        self.max_prompt_chars = limit;
        self
    }

    pub fn embedding_model(mut self, model: impl Into<String>) -> Self {
        self.embedding_model = model.into();
        self
    }

    pub fn build(self) -> LlmClient {
        LlmClient {
            backend: self.backend,
            endpoint: self.endpoint,
            cache: self.cache.unwrap_or_else(|| Arc::new(ResponseCache::in_memory())),
            retry: self.retry,
            parallelism: self.parallelism,
            max_prompt_chars: self.max_prompt_chars,
            embedding_model: self.embedding_model,
            gate: Gate::new(self.parallelism),
            inflight: Mutex::new(HashMap::new()),
            counters: Counters::default(),
            log: Mutex::new(Vec::new()),
        }
    }
}

pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-3-small";

/// Cached, retrying, thread-safe front end to a [`ChatBackend`].
pub struct LlmClient {
    backend: Box<dyn ChatBackend>,
    endpoint: String,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    parallelism: usize,
    max_prompt_chars: Option<usize>,
    embedding_model: String,
    gate: Gate,
    inflight: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    counters: Counters,
    log: Mutex<Vec<CallRecord>>,
}

impl LlmClient {
    pub fn builder(backend: Box<dyn ChatBackend>) -> LlmClientBuilder {
        LlmClientBuilder {
            endpoint: backend.kind().to_string(),
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            parallelism: 4,
            max_prompt_chars: None,
            embedding_model: DEFAULT_EMBEDDING_MODEL.to_string(),
        }
    }

    pub fn from_config(
        cfg: &BackendConfig,
        registry: &BackendRegistry,
        cache: Arc<ResponseCache>,
    ) -> Result<Self, LlmError> {
        let mut b = Self::builder(registry.build(cfg)?)
            .endpoint(cfg.endpoint_id())
            .cache(cache)
            .max_prompt_chars(cfg.max_prompt_chars);
        if let Some(n) = cfg.parallelism {
            b = b.parallelism(n);
        }
        if let Some(ms) = cfg.retry_base_ms {
            b = b.retry(RetryPolicy {
                base_delay: Duration::from_millis(ms),
                ..RetryPolicy::default()
            });
        }
        if let Some(m) = &cfg.embedding_model {
            b = b.embedding_model(m.clone());
        }
        Ok(b.build())
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn digest(&self, req: &ChatRequest) -> CacheKey {
        CacheKey::for_chat(&self.endpoint, req)
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            wire_calls: self.counters.wire_calls.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            retries: self.counters.retries.load(Ordering::SeqCst),
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        if let Some(limit) = self.max_prompt_chars {
            let chars = req.prompt_chars();
            if chars > limit {
                return Err(LlmError::PromptTooLong { chars, limit });
            }
        }
        let key = self.digest(req);
        if let Some(resp) = self.cached_chat(&key) {
            self.record(CallKind::Chat, key, true, 0, None);
            return Ok(resp);
        }

        let slot = self.inflight_slot(key);
        let result = {
            let _held = slot.lock().unwrap();
            // An identical request may have finished while we waited.
            if let Some(resp) = self.cached_chat(&key) {
                self.record(CallKind::Chat, key, true, 0, None);
                Ok(resp)
            } else {
                self.complete_on_wire(key, req)
            }
        };
        self.release_slot(key, slot);
        result
    }

    /// Completes every request, preserving input order in the output.
    pub fn complete_many(&self, reqs: &[ChatRequest]) -> Vec<Result<ChatResponse, LlmError>> {
        self.fan_out(reqs, |r| self.complete(r))
    }

    /// Maps `f` over `items` on up to `parallelism` threads; output order is input order.
    pub fn fan_out<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let workers = self.parallelism.min(items.len());
        if workers <= 1 {
            return items.iter().map(&f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(f(&items[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }

    /// One vector per text, in order; each text is cached on its own.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::InvalidRequest("embed needs at least one text".into()));
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(LlmError::InvalidRequest("cannot embed empty text".into()));
        }
        let keys: Vec<CacheKey> = texts
            .iter()
            .map(|t| CacheKey::for_embedding(&self.endpoint, &self.embedding_model, t))
            .collect();
        let mut found: HashMap<CacheKey, Vec<f64>> = HashMap::new();
        let mut missing: Vec<(CacheKey, String)> = Vec::new();
        for (key, text) in keys.iter().zip(texts) {
            if found.contains_key(key) || missing.iter().any(|(k, _)| k == key) {
                continue;
            }
            match self.cache.get(key) {
                Some(CacheEntry::Embedding(v)) => {
                    self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                    self.record(CallKind::Embed, *key, true, 0, None);
                    found.insert(*key, v);
                }
                _ => missing.push((*key, text.clone())),
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
            let batch_key = missing[0].0;
            let (result, retries) = self.with_retries(|| self.backend.embed(&self.embedding_model, &batch));
            let vectors = match result {
                Ok(v) => v,
                Err(e) => {
                    let err = self.map_wire_error(e, batch_key, retries);
                    self.record(CallKind::Embed, batch_key, false, retries, Some(err.to_string()));
                    return Err(err);
                }
            };
            if vectors.len() != batch.len() {
                return Err(LlmError::InvalidResponse(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for ((key, _), v) in missing.iter().zip(vectors) {
                self.record(CallKind::Embed, *key, false, retries, None);
                found.insert(*key, v);
            }
        }
        let out: Vec<Vec<f64>> = keys.iter().map(|k| found[k].clone()).collect();
        let expected = out[0].len();
        if let Some(bad) = out.iter().find(|v| v.len() != expected) {
            return Err(LlmError::DimensionMismatch {
                expected,
                got: bad.len(),
            });
        }
        // Persist only once the whole batch is known to be consistent.
        for (key, v) in keys.iter().zip(&out) {
            if !self.cache.contains(key) {
                self.cache.put(*key, CacheEntry::Embedding(v.clone()))?;
            }
        }
        Ok(out)
    }

    fn cached_chat(&self, key: &CacheKey) -> Option<ChatResponse> {
        match self.cache.get(key)? {
            CacheEntry::Chat {
                text,
                finish_reason,
                usage,
            } => {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                Some(ChatResponse {
                    text,
                    finish_reason,
                    usage,
                    cached: true,
                })
            }
            CacheEntry::Embedding(_) => None,
        }
    }

    fn complete_on_wire(&self, key: CacheKey, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let (result, retries) = self.with_retries(|| self.backend.chat(req));
        let reply: WireReply = match result {
            Ok(r) => r,
            Err(e) => {
                let err = self.map_wire_error(e, key, retries);
                self.record(CallKind::Chat, key, false, retries, Some(err.to_string()));
                return Err(err);
            }
        };
        let mut finish_reason = reply.finish_reason;
        if reply.text.trim().is_empty() {
            finish_reason = FinishReason::Other;
        } else {
            self.cache.put(
                key,
                CacheEntry::Chat {
                    text: reply.text.clone(),
                    finish_reason,
                    usage: reply.usage,
                },
            )?;
        }
        if retries > 0 {
            tracing::info!(key = %key, retry_count = retries, "completed after retries");
        }
        self.record(CallKind::Chat, key, false, retries, None);
        Ok(ChatResponse {
            text: reply.text,
            finish_reason,
            usage: reply.usage,
            cached: false,
        })
    }

    /// Runs `call` under the parallelism gate until it succeeds, fails
    /// permanently, or exhausts the attempt budget. Returns the retry count.
    fn with_retries<T>(&self, call: impl Fn() -> Result<T, WireError>) -> (Result<T, WireError>, u32) {
        let mut retries = 0;
        loop {
            let outcome = {
                let _permit = self.gate.acquire();
                call()
            };
            if !matches!(outcome, Err(WireError::Refused)) {
                self.counters.wire_calls.fetch_add(1, Ordering::SeqCst);
            }
            match outcome {
                Err(e) if e.is_retryable() && retries + 1 < self.retry.max_attempts => {
                    retries += 1;
                    self.counters.retries.fetch_add(1, Ordering::SeqCst);
                    tracing::debug!(retry = retries, error = ?e, "retrying");
                    std::thread::sleep(self.retry.delay(retries));
                }
                other => return (other, retries),
            }
        }
    }

    fn map_wire_error(&self, e: WireError, key: CacheKey, retries: u32) -> LlmError {
        match e {
            WireError::Status { status: 429, .. } => LlmError::RateLimited {
                attempts: retries + 1,
            },
            WireError::Status { status, body } => LlmError::Transport { status, body },
            WireError::Timeout => LlmError::Transport {
                status: 0,
                body: "timed out".into(),
            },
            WireError::Connection(msg) => LlmError::Transport { status: 0, body: msg },
            WireError::Invalid(msg) => LlmError::InvalidResponse(msg),
            WireError::Refused => LlmError::ReplayMiss(key),
            WireError::Unsupported(what) => LlmError::Unsupported(what),
        }
    }

    fn record(&self, kind: CallKind, key: CacheKey, cached: bool, retry_count: u32, error: Option<String>) {
        self.log.lock().unwrap().push(CallRecord {
            kind,
            key,
            cached,
            retry_count,
            error,
        });
    }

    fn inflight_slot(&self, key: CacheKey) -> Arc<Mutex<()>> {
        self.inflight
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone()
    }

    fn release_slot(&self, key: CacheKey, slot: Arc<Mutex<()>>) {
        let mut map = self.inflight.lock().unwrap();
        // Two references left means nobody else is waiting on this key.
        if Arc::strong_count(&slot) == 2 {
            map.remove(&key);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicU32;

    use super::*;
    use crate::llm::mock::{EmbedderSpec, MockBackend, MockEmbedder};
    use crate::llm::Decoding;

    fn req(content: &str) -> ChatRequest {
        ChatRequest::prompt("m", content.to_string(), Decoding::default())
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::from_millis(1),
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn second_call_is_a_cache_hit() {
        let client = LlmClient::builder(Box::new(MockBackend::echo())).build();
        let a = client.complete(&req("hi")).unwrap();
        let b = client.complete(&req("hi")).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(client.stats().wire_calls, 1);
        assert_eq!(client.stats().cache_hits, 1);
    }

    #[test]
    fn rate_limited_three_times_then_ok() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::from_fn(move |_| {
            if seen.fetch_add(1, Ordering::SeqCst) < 3 {
                Err(WireError::Status { status: 429, body: "slow down".into() })
            } else {
                Ok(WireReply::stop("fine"))
            }
        });
        let client = LlmClient::builder(Box::new(backend)).retry(fast_retry()).build();
        assert_eq!(client.complete(&req("x")).unwrap().text, "fine");
        let log = client.call_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].retry_count, 3);
        assert_eq!(client.stats().wire_calls, 4);
    }

    #[test]
    fn retry_budget_is_five_attempts() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::from_fn(move |_| {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(WireError::Status { status: 429, body: String::new() })
        });
        let client = LlmClient::builder(Box::new(backend)).retry(fast_retry()).build();
        assert!(matches!(
            client.complete(&req("x")),
            Err(LlmError::RateLimited { attempts: 5 })
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::from_fn(move |_| {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(WireError::Status { status: 400, body: "bad".into() })
        });
        let client = LlmClient::builder(Box::new(backend)).retry(fast_retry()).build();
        assert!(matches!(
            client.complete(&req("x")),
            Err(LlmError::Transport { status: 400, .. })
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn concurrent_identical_requests_share_one_wire_call() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::from_fn(move |r| {
            seen.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(30));
            Ok(WireReply::stop(r.last_user().unwrap()))
        });
        let client = LlmClient::builder(Box::new(backend)).parallelism(8).build();
        let reqs: Vec<ChatRequest> = (0..8).map(|_| req("same")).collect();
        let out = client.complete_many(&reqs);
        assert!(out.iter().all(|r| r.as_ref().unwrap().text == "same"));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn complete_many_preserves_order() {
        let client = LlmClient::builder(Box::new(MockBackend::echo())).parallelism(3).build();
        let reqs: Vec<ChatRequest> = (0..20).map(|i| req(&format!("q{i}"))).collect();
        let out = client.complete_many(&reqs);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("q{i}"));
        }
    }

    #[test]
    fn empty_reply_is_not_cached() {
        let client = LlmClient::builder(Box::new(MockBackend::from_fn(|_| Ok(WireReply::stop(""))))).build();
        let r = client.complete(&req("x")).unwrap();
        assert_eq!(r.finish_reason, FinishReason::Other);
        assert!(client.cache().is_empty());
    }

    #[test]
    fn replay_miss_names_the_key() {
        let client = LlmClient::builder(Box::new(crate::llm::ReplayBackend)).build();
        let key = client.digest(&req("x"));
        match client.complete(&req("x")) {
            Err(LlmError::ReplayMiss(k)) => assert_eq!(k, key),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(client.stats().wire_calls, 0);
    }

    #[test]
    fn prompt_length_limit() {
        let client = LlmClient::builder(Box::new(MockBackend::echo()))
            .max_prompt_chars(Some(3))
            .build();
        assert!(matches!(
            client.complete(&req("four")),
            Err(LlmError::PromptTooLong { chars: 4, limit: 3 })
        ));
    }

    #[test]
    fn embeddings_are_cached_per_text() {
        let spec = EmbedderSpec {
            kind: MockEmbedder::TokenCountBasis,
            dim: 4,
        };
        let client = LlmClient::builder(Box::new(MockBackend::echo().with_embedder(spec))).build();
        let texts = vec!["x".to_string(), "x y".to_string(), "x".to_string()];
        let v = client.embed(&texts).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], v[2]);
        assert_eq!(v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum::<f64>(), 0.0);
        assert_eq!(client.stats().wire_calls, 1);
        client.embed(&texts[..2]).unwrap();
        assert_eq!(client.stats().wire_calls, 1);
        assert!(client.embed(&[]).is_err());
        assert!(client.embed(&[" ".to_string()]).is_err());
    }

    #[test]
    fn ragged_embedding_batch_is_rejected() {
        struct Ragged;
        impl ChatBackend for Ragged {
            fn kind(&self) -> &'static str {
                "ragged"
            }
            fn chat(&self, _: &ChatRequest) -> Result<WireReply, WireError> {
                Err(WireError::Unsupported("chat"))
            }
            fn embed(&self, _: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, WireError> {
                Ok(texts.iter().map(|t| vec![0.0; t.len()]).collect())
            }
        }
        let client = LlmClient::builder(Box::new(Ragged)).build();
        let err = client.embed(&["a".into(), "bb".into()]).unwrap_err();
        assert!(matches!(err, LlmError::DimensionMismatch { expected: 1, got: 2 }));
        assert!(client.cache().is_empty());
    }
}
