//! Uniform access to chat-completion and embedding endpoints.
//!
//! Two implementations sit behind the [`ChatBackend`] / [`EmbedBackend`]
//! traits: [`HttpBackend`] speaks the JSON-over-HTTP convention of hosted
//! model servers, and [`MockBackend`] resolves everything in-process from a
//! script so the whole pipeline can run deterministically offline.

use crate::error::BackendError;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    /// Image locators (URLs or file paths) attached to the message.
    pub image_refs: Vec<String>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            text: text.into(),
            image_refs: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            text: text.into(),
            image_refs: Vec::new(),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_refs.push(image_ref.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Stage name carried through for logging and mock-miss reports.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        temperature: f64,
        request_tag: impl Into<String>,
    ) -> Self {
        Self {
            messages,
            temperature,
            max_tokens: 512,
            request_tag: request_tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == ChatRole::User) {
            return Err(BackendError::InvalidRequest(
                "chat request has no user message".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::ProtocolError("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::ProtocolError(
                "embedding vector contains non-finite values".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (a, b) in self.values.iter().zip(other.values.iter()) {
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    pub fn euclidean(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Connection settings for one remote endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    /// Name of the environment variable that holds the API key. Empty means
    /// no auth header (keys never live in config files).
    #[serde(default)]
    pub api_key_env: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_rps() -> f64 {
    4.0
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::InvalidRequest(
                "timeout_ms must be > 0".into(),
            ));
        }
        if !self.requests_per_second.is_finite() || self.requests_per_second <= 0.0 {
            return Err(BackendError::InvalidRequest(
                "requests_per_second must be > 0".into(),
            ));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

// ---------------------------------------------------------------------------
// Rate limiting
// ---------------------------------------------------------------------------

/// Minimum-interval limiter: grants time slots spaced `1/rps` apart, so any
/// window of length `w` contains at most `floor(w * rps) + 1` granted slots.
pub struct RateLimiter {
    min_interval: Duration,
    last_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let rps = if requests_per_second > 0.0 {
            requests_per_second
        } else {
            1.0
        };
        Self {
            min_interval: Duration::from_secs_f64(1.0 / rps),
            last_slot: Mutex::new(None),
        }
    }

    /// Blocks until a slot is available and returns the granted slot time.
    pub fn acquire(&self) -> Instant {
        let slot = {
            let mut last = self.last_slot.lock().unwrap();
            let now = Instant::now();
            let slot = match *last {
                Some(prev) => (prev + self.min_interval).max(now),
                None => now,
            };
            *last = Some(slot);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
        slot
    }

    pub fn min_interval(&self) -> Duration {
        self.min_interval
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

/// One HTTP round trip. Split out so retry behavior can be tested with
/// injected failures instead of a live server.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
        timeout_ms: u64,
    ) -> Result<(u16, String), TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
        timeout_ms: u64,
    ) -> Result<(u16, String), TransportError> {
        let mut req = self
            .client
            .post(url)
            .timeout(Duration::from_millis(timeout_ms))
            .json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        Ok((status, text))
    }
}

/// Client for OpenAI-style chat and embedding endpoints.
///
/// Transient failures (connect errors, timeouts, 429/5xx) are retried up to
/// `max_retries` times with exponential backoff; every attempt passes
/// through the rate limiter.
pub struct HttpBackend {
    cfg: BackendConfig,
    transport: Box<dyn Transport>,
    limiter: RateLimiter,
    backoff_base_ms: u64,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Self::with_transport(cfg, Box::new(ReqwestTransport::new()))
    }

    pub fn with_transport(
        cfg: BackendConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, BackendError> {
        cfg.validate()?;
        let limiter = RateLimiter::new(cfg.requests_per_second);
        Ok(Self {
            cfg,
            transport,
            limiter,
            backoff_base_ms: 50,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn headers(&self) -> Result<Vec<(String, String)>, BackendError> {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if !self.cfg.api_key_env.is_empty() {
            let key = std::env::var(&self.cfg.api_key_env).map_err(|_| {
                BackendError::AuthFailure(format!(
                    "environment variable {} not set",
                    self.cfg.api_key_env
                ))
            })?;
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        Ok(headers)
    }

    /// POSTs with retry. Returns the body of the first 2xx response.
    fn post_with_retry(&self, url: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let headers = self.headers()?;
        let mut attempts = 0u32;
        let mut last_failure;
        loop {
            attempts += 1;
            self.limiter.acquire();
            match self
                .transport
                .post_json(url, &headers, body, self.cfg.timeout_ms)
            {
                Ok((status, text)) if (200..300).contains(&status) => return Ok(text),
                Ok((status, text)) => {
                    if status == 401 || status == 403 {
                        return Err(BackendError::AuthFailure(format!("status {status}")));
                    }
                    if status == 429 || status >= 500 {
                        last_failure = format!("status {status}: {}", excerpt(&text));
                    } else {
                        return Err(BackendError::ProtocolError(format!(
                            "status {status}: {}",
                            excerpt(&text)
                        )));
                    }
                }
                Err(TransportError::Timeout) => {
                    last_failure = format!("timeout after {} ms", self.cfg.timeout_ms);
                }
                Err(TransportError::Connect(msg)) => {
                    last_failure = format!("connect: {msg}");
                }
            }
            if attempts > self.cfg.max_retries {
                return Err(BackendError::RetriesExhausted {
                    attempts,
                    last: last_failure,
                });
            }
            log::warn!(
                "backend retry {attempts}/{}: {last_failure}",
                self.cfg.max_retries
            );
            let backoff = self.backoff_base_ms << (attempts - 1).min(5);
            std::thread::sleep(Duration::from_millis(backoff));
        }
    }

    fn chat_body(&self, req: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| {
                let mut content = vec![json!({"type": "text", "text": m.text})];
                for image in &m.image_refs {
                    content.push(json!({"type": "image", "image": image}));
                }
                json!({
                    "role": match m.role {
                        ChatRole::System => "system",
                        ChatRole::User => "user",
                        ChatRole::Assistant => "assistant",
                    },
                    "content": content,
                })
            })
            .collect();
        json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }
}

fn excerpt(body: &str) -> String {
    let trimmed = body.trim();
    if trimmed.len() > 200 {
        let cut = trimmed
            .char_indices()
            .take_while(|(i, _)| *i < 200)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}...", &trimmed[..cut])
    } else {
        trimmed.to_string()
    }
}

fn parse_chat_response(body: &str) -> Result<(String, FinishReason), BackendError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| BackendError::ProtocolError(format!("bad json: {e}: {}", excerpt(body))))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::ProtocolError(format!("no choices in {}", excerpt(body))))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .ok_or_else(|| {
            BackendError::ProtocolError(format!("no message content in {}", excerpt(body)))
        })?;
    // content is a plain string on most servers, an array of typed parts on
    // some; accept both.
    let text = match content {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect::<Vec<_>>()
            .join(""),
        other => {
            return Err(BackendError::ProtocolError(format!(
                "unexpected content shape: {other}"
            )))
        }
    };
    let finish = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("length") => FinishReason::Length,
        Some("error") => FinishReason::Error,
        _ => FinishReason::Stop,
    };
    Ok((text, finish))
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let body =
            self.post_with_retry(&self.endpoint("chat/completions"), &self.chat_body(req))?;
        let (text, finish_reason) = parse_chat_response(&body)?;
        Ok(ChatResponse {
            text,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl EmbedBackend for HttpBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::InvalidRequest(
                "embed requires non-empty texts".into(),
            ));
        }
        let body = json!({"model": self.cfg.model_name, "input": texts});
        let raw = self.post_with_retry(&self.endpoint("embeddings"), &body)?;
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| BackendError::ProtocolError(format!("bad json: {e}")))?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| BackendError::ProtocolError(format!("no data in {}", excerpt(&raw))))?;
        if data.len() != texts.len() {
            return Err(BackendError::ProtocolError(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| BackendError::ProtocolError("missing embedding field".into()))?
                .iter()
                .filter_map(|v| v.as_f64())
                .collect();
            out.push(EmbeddingVector::new(values)?);
        }
        let dim = out[0].dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(BackendError::DimensionMismatch(dim, bad.dim()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

/// Matcher over the last user message of a chat request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum MatcherSpec {
    Substring(String),
    Regex(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MockRuleSpec {
    pub matcher: MatcherSpec,
    /// Replies consumed in order per matching call; the last one repeats
    /// once the sequence is exhausted.
    pub replies: Vec<String>,
}

impl MockRuleSpec {
    pub fn substring(pattern: impl Into<String>, replies: Vec<String>) -> Self {
        Self {
            matcher: MatcherSpec::Substring(pattern.into()),
            replies,
        }
    }

    pub fn regex(pattern: impl Into<String>, replies: Vec<String>) -> Self {
        Self {
            matcher: MatcherSpec::Regex(pattern.into()),
            replies,
        }
    }
}

/// Serializable mock description, loadable from a `--mock-script` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub chat: Vec<MockRuleSpec>,
    /// Exact-text embedding table.
    #[serde(default)]
    pub embed_table: BTreeMap<String, Vec<f64>>,
    /// When set, texts missing from the table get a deterministic
    /// hash-derived vector of this dimension instead of an error.
    #[serde(default)]
    pub embed_fallback_dim: Option<usize>,
}

enum CompiledMatcher {
    Substring(String),
    Regex(Regex),
}

impl CompiledMatcher {
    fn matches(&self, text: &str) -> bool {
        match self {
            CompiledMatcher::Substring(s) => text.contains(s.as_str()),
            CompiledMatcher::Regex(r) => r.is_match(text),
        }
    }
}

struct CompiledRule {
    matcher: CompiledMatcher,
    replies: Vec<String>,
    cursor: Mutex<usize>,
}

/// In-process scripted backend. First matching rule wins; rules keep an
/// internal cursor so reply sequences advance per hit. Identical request
/// sequences always produce identical response sequences.
pub struct MockBackend {
    rules: Vec<CompiledRule>,
    embed_table: BTreeMap<String, Vec<f64>>,
    embed_fallback_dim: Option<usize>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

/// Installs a mock from a script; the returned handle implements both
/// backend traits and exposes call counters for tests.
pub fn install_mock(script: MockScript) -> Result<MockBackend, BackendError> {
    let mut rules = Vec::with_capacity(script.chat.len());
    for spec in script.chat {
        if spec.replies.is_empty() {
            return Err(BackendError::InvalidMatcher(
                "rule has no replies".to_string(),
            ));
        }
        let matcher = match spec.matcher {
            MatcherSpec::Substring(s) => {
                if s.is_empty() {
                    return Err(BackendError::InvalidMatcher("empty substring".to_string()));
                }
                CompiledMatcher::Substring(s)
            }
            MatcherSpec::Regex(r) => CompiledMatcher::Regex(
                Regex::new(&r).map_err(|e| BackendError::InvalidMatcher(e.to_string()))?,
            ),
        };
        rules.push(CompiledRule {
            matcher,
            replies: spec.replies,
            cursor: Mutex::new(0),
        });
    }
    Ok(MockBackend {
        rules,
        embed_table: script.embed_table,
        embed_fallback_dim: script.embed_fallback_dim,
        chat_calls: AtomicUsize::new(0),
        embed_calls: AtomicUsize::new(0),
    })
}

impl MockBackend {
    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }
}

/// Deterministic pseudo-embedding: SHA-256 stream mapped into [-1, 1].
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    use sha2::{Digest, Sha256};
    let mut values = Vec::with_capacity(dim);
    let mut round = 0u32;
    while values.len() < dim {
        let mut hasher = Sha256::new();
        hasher.update(round.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        for chunk in digest.chunks_exact(8) {
            if values.len() == dim {
                break;
            }
            let raw = u64::from_le_bytes(chunk.try_into().unwrap());
            values.push((raw as f64 / u64::MAX as f64) * 2.0 - 1.0);
        }
        round += 1;
    }
    values
}

impl ChatBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let text = req.last_user_text();
        for rule in &self.rules {
            if rule.matcher.matches(text) {
                let mut cursor = rule.cursor.lock().unwrap();
                let reply = rule.replies[(*cursor).min(rule.replies.len() - 1)].clone();
                *cursor += 1;
                return Ok(ChatResponse {
                    text: reply,
                    finish_reason: FinishReason::Stop,
                    latency_ms: 0,
                });
            }
        }
        Err(BackendError::MockMiss {
            request_tag: req.request_tag.clone(),
        })
    }
}

impl EmbedBackend for MockBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::InvalidRequest(
                "embed requires non-empty texts".into(),
            ));
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let values = match self.embed_table.get(text) {
                Some(v) => v.clone(),
                None => match self.embed_fallback_dim {
                    Some(dim) => hash_embedding(text, dim),
                    None => {
                        return Err(BackendError::ProtocolError(format!(
                            "mock embed table has no entry for {text:?}"
                        )))
                    }
                },
            };
            out.push(EmbeddingVector::new(values)?);
        }
        let dim = out[0].dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(BackendError::DimensionMismatch(dim, bad.dim()));
        }
        Ok(out)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// embed preserves cardinality and per-position identity for every
        /// input list.
        #[test]
        fn embed_preserves_cardinality_and_order(
            texts in prop::collection::vec("[a-z]{1,12}", 1..20),
        ) {
            let mock = install_mock(MockScript {
                embed_fallback_dim: Some(5),
                ..Default::default()
            })
            .unwrap();
            let out = mock.embed(&texts).unwrap();
            prop_assert_eq!(out.len(), texts.len());
            for (text, vector) in texts.iter().zip(out.iter()) {
                let single = mock.embed(std::slice::from_ref(text)).unwrap();
                prop_assert_eq!(&single[0], vector);
            }
        }

        /// Identical request sequences produce identical response sequences.
        #[test]
        fn mock_is_pure_across_instances(
            prompts in prop::collection::vec("[a-z ]{1,30}", 1..12),
        ) {
            let script = MockScript {
                chat: vec![
                    MockRuleSpec::substring("a", vec!["one".into(), "two".into()]),
                    MockRuleSpec::substring("e", vec!["three".into()]),
                ],
                ..Default::default()
            };
            let run = |script: MockScript| -> Vec<String> {
                let mock = install_mock(script).unwrap();
                prompts
                    .iter()
                    .map(|p| {
                        let req = ChatRequest::new(vec![ChatMessage::user(p)], 0.0, "t");
                        mock.chat(&req).map(|r| r.text).unwrap_or_else(|e| e.to_string())
                    })
                    .collect()
            };
            prop_assert_eq!(run(script.clone()), run(script));
        }
    }
}
