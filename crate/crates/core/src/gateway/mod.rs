//! Chat-completions gateway.
//!
//! Every LLM call of the pipeline (shard teacher, support agent, SSBC
//! annotator, distress teacher) and every hidden-state request goes through
//! [`Gateway`]. Responses are cached on disk under a content hash of the full
//! request, so a warm cache replays a run without touching the network.

mod cache;
mod transport;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, info, warn};

pub use cache::{CacheEntry, ResponseCache};
pub use transport::{HttpReply, HttpTransport, Transport, TransportFailure};

use crate::store::{hash_parts, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.messages.is_empty() {
            return bad("messages must be non-empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        let start = usize::from(self.messages[0].role == Role::System);
        for (i, m) in self.messages[start..].iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return bad("roles must alternate user/assistant after the system prefix");
            }
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.trim_end_matches('/'))
    }

    /// Wire body `{model, messages, temperature, max_tokens, seed?}`.
    pub fn body(&self) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub cached: bool,
    pub latency_ms: u64,
    /// Cache key of the exchange; raw responses are retrievable by it.
    pub key: String,
}

/// Stable hash over endpoint, model, messages, temperature, max_tokens and
/// seed. Built field by field, so serialization order plays no role.
pub fn cache_key(req: &ChatRequest) -> String {
    let endpoint = req.endpoint.trim_end_matches('/');
    // -0.0 and 0.0 denote the same decoding setting
    let temperature = if req.temperature == 0.0 { 0.0f64 } else { req.temperature };
    let temp_bits = temperature.to_bits().to_le_bytes();
    let max_tokens = req.max_tokens.to_le_bytes();
    let seed = match req.seed {
        Some(s) => [&[1u8][..], &s.to_le_bytes()].concat(),
        None => vec![0u8],
    };
    let n_messages = (req.messages.len() as u64).to_le_bytes();
    let mut parts: Vec<&[u8]> = vec![
        b"chat/v1",
        endpoint.as_bytes(),
        req.model.as_bytes(),
        &temp_bits,
        &max_tokens,
        &seed,
        &n_messages,
    ];
    for m in &req.messages {
        parts.push(m.role.as_str().as_bytes());
        parts.push(m.content.as_bytes());
    }
    hash_parts(parts)
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("offline mode and no cached response for key {0}")]
    CacheMiss(String),
    #[error(transparent)]
    Cache(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub retry_seed: u64,
    pub concurrency: usize,
    pub timeout_secs: u64,
    /// Requests per minute, keyed by endpoint base URL.
    pub rate_limits: HashMap<String, u32>,
    /// Serve only from cache; a miss is an error.
    pub offline: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: 5,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            retry_seed: 0,
            concurrency: 4,
            timeout_secs: 120,
            rate_limits: HashMap::new(),
            offline: false,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    config: GatewayConfig,
    api_keys: HashMap<String, String>,
    permits: Semaphore,
    next_slot: Mutex<HashMap<String, Instant>>,
    network_calls: AtomicU64,
}

impl Gateway {
    pub fn new(
        transport: Arc<dyn Transport>,
        cache: Option<ResponseCache>,
        config: GatewayConfig,
    ) -> Self {
        Gateway {
            permits: Semaphore::new(config.concurrency),
            transport,
            cache,
            config,
            api_keys: HashMap::new(),
            next_slot: Mutex::new(HashMap::new()),
            network_calls: AtomicU64::new(0),
        }
    }

    /// HTTP transport with an on-disk cache.
    pub fn http(cache_dir: impl Into<std::path::PathBuf>, config: GatewayConfig) -> Self {
        Self::new(
            Arc::new(HttpTransport::new()),
            Some(ResponseCache::new(cache_dir)),
            config,
        )
    }

    pub fn with_api_key(mut self, endpoint: &str, key: impl Into<String>) -> Self {
        self.api_keys
            .insert(endpoint.trim_end_matches('/').to_string(), key.into());
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Number of HTTP attempts issued so far (cache hits excluded).
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    /// Delays slept before retry `1..=max_retries` of the request with `key`:
    /// `min(cap, base * 2^i)` scaled by a factor in `[0.5, 1.0)` drawn from an
    /// RNG seeded by the retry seed and the key.
    pub fn backoff_schedule(&self, key: &str) -> Vec<Duration> {
        let mut seed_bytes = [0u8; 32];
        let key_hash = hash_parts([key.as_bytes(), &self.config.retry_seed.to_le_bytes()[..]]);
        let raw = hex::decode(&key_hash).unwrap_or_default();
        seed_bytes[..raw.len().min(32)].copy_from_slice(&raw[..raw.len().min(32)]);
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        (0..self.config.max_retries)
            .map(|i| {
                let exp = self
                    .config
                    .backoff_base_ms
                    .saturating_mul(1u64 << i.min(32))
                    .min(self.config.backoff_cap_ms);
                let jitter: f64 = rng.random_range(0.5..1.0);
                Duration::from_millis((exp as f64 * jitter).round() as u64)
            })
            .collect()
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = cache_key(req);
        let body = req.body();
        let (raw, cached, latency_ms) =
            self.post_cached(&req.url(), &req.endpoint, &key, &body, parse_chat_content)?;
        let content = parse_chat_content(&raw)?;
        info!(
            target: "llm_call",
            endpoint = %req.endpoint,
            model = %req.model,
            temperature = req.temperature,
            cached,
            latency_ms,
            key = %key,
            "chat completion"
        );
        Ok(ChatResponse {
            content,
            cached,
            latency_ms,
            key,
        })
    }

    /// POST `body` to `url`, consulting and filling the cache under `key`.
    /// `check` must accept the body before it is cached. Returns the raw body,
    /// whether it came from the cache, and the wall-clock latency including
    /// backoff sleeps.
    pub fn post_cached<T>(
        &self,
        url: &str,
        endpoint: &str,
        key: &str,
        body: &serde_json::Value,
        check: impl Fn(&str) -> Result<T, GatewayError>,
    ) -> Result<(String, bool, u64), GatewayError> {
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(key)? {
                return Ok((entry.body, true, 0));
            }
        }
        if self.config.offline {
            return Err(GatewayError::CacheMiss(key.to_string()));
        }
        let started = Instant::now();
        let raw = self.post_with_retries(url, endpoint, key, &body.to_string())?;
        check(&raw)?;
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key: key.to_string(),
                request: body.clone(),
                body: raw.clone(),
            })?;
        }
        Ok((raw, false, started.elapsed().as_millis() as u64))
    }

    fn post_with_retries(
        &self,
        url: &str,
        endpoint: &str,
        key: &str,
        body: &str,
    ) -> Result<String, GatewayError> {
        let endpoint = endpoint.trim_end_matches('/');
        let bearer = self.api_keys.get(endpoint).map(String::as_str);
        let timeout = Duration::from_secs(self.config.timeout_secs.max(1));
        let schedule = self.backoff_schedule(key);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.permits.acquire();
                self.wait_for_rate_slot(endpoint);
                self.network_calls.fetch_add(1, Ordering::Relaxed);
                self.transport.post_json(url, bearer, body, timeout)
            };
            let failure = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => return Ok(reply.body),
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    format!("HTTP {}: {}", reply.status, truncate(&reply.body, 200))
                }
                Ok(reply) => {
                    return Err(GatewayError::Request {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(f) => f.message,
            };
            let Some(delay) = schedule.get(attempts as usize - 1) else {
                return Err(GatewayError::Transport {
                    attempts,
                    message: failure,
                });
            };
            warn!(url, attempt = attempts, delay_ms = delay.as_millis() as u64, %failure, "retrying");
            std::thread::sleep(*delay);
        }
    }

    fn wait_for_rate_slot(&self, endpoint: &str) {
        let Some(&rpm) = self.config.rate_limits.get(endpoint) else {
            return;
        };
        if rpm == 0 {
            return;
        }
        let interval = Duration::from_secs_f64(60.0 / rpm as f64);
        let wait = {
            let mut slots = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = slots.get(endpoint).copied().unwrap_or(now).max(now);
            slots.insert(endpoint.to_string(), slot + interval);
            slot - now
        };
        if !wait.is_zero() {
            debug!(endpoint, wait_ms = wait.as_millis() as u64, "rate limited");
            std::thread::sleep(wait);
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Extract `choices[0].message.content` from a completions response body.
pub fn parse_chat_content(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}
