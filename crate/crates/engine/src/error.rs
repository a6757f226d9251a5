//! Error types shared across the engine.

use thiserror::Error;

/// Errors from dataset loading, stats, and sampling.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema violation at line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("duplicate pair_id {pair_id:?}")]
    DuplicateId { pair_id: String },
    #[error("proportion must be in (0, 1], got {0}")]
    InvalidProportion(f64),
}

/// Errors from chat/embedding backends (live or mock).
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request invalid: {0}")]
    InvalidRequest(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no mock rule matched request tagged {request_tag:?}")]
    MockMiss { request_tag: String },
    #[error("invalid mock matcher: {0}")]
    InvalidMatcher(String),
    #[error("embedding endpoint returned ragged vectors ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

/// Errors from evidence search, crawling, and the cache.
#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("search api failure: {0}")]
    ApiFailure(String),
    #[error("search quota exceeded")]
    QuotaExceeded,
    #[error("image not readable: {0}")]
    ImageUnreadable(String),
    #[error("fetch failed with status {0}")]
    FetchFailure(u16),
    #[error("fetch refused by robots policy: {0}")]
    RobotsDisallowed(String),
    #[error("page is not html: {0}")]
    NonHtmlContent(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt cache entry for pair {pair_id:?} (quarantined)")]
    CorruptEntry { pair_id: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Errors from evidence selection.
#[derive(Debug, Error)]
pub enum RerankError {
    #[error("evidence set is empty")]
    EmptyEvidence,
    #[error("no caption index found in model output")]
    NoIndexFound,
    #[error("caption index {parsed} out of range 1..={c_range}")]
    OutOfRange { parsed: i64, c_range: usize },
    #[error("selection retries exhausted and fallback strategy unavailable: {0}")]
    RetriesExhausted(String),
    #[error("embedding backend required for cosine strategy but not configured")]
    NoEmbedBackend,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Errors from instruction-sample construction.
#[derive(Debug, Error)]
pub enum BuildError {
    #[error("pair {pair_id:?} has no ground-truth label")]
    UnlabeledPair { pair_id: String },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Errors from scoring and report generation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot score an empty judgment list")]
    EmptyInput,
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Pipeline stages, used to tag propagated errors and run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Retrieval,
    Rerank,
    Rewrite,
    Judge,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Retrieval => write!(f, "retrieval"),
            Stage::Rerank => write!(f, "rerank"),
            Stage::Rewrite => write!(f, "rewrite"),
            Stage::Judge => write!(f, "judge"),
        }
    }
}

/// Error from a full detection run, tagged with the stage that failed.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct DetectError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl DetectError {
    pub fn new<E>(stage: Stage, source: E) -> Self
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        Self {
            stage,
            source: Box::new(source),
        }
    }
}

/// Configuration validation failure, with the offending field path.
#[derive(Debug, Error)]
#[error("config error at {field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
