//! Reverse-image search clients.
//!
//! The live client speaks the web-detection API; the fixture client replays
//! saved responses from a directory so retrieval runs offline.

use crate::error::RetrievalError;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use url::Url;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveredVia {
    ReverseImage,
    Direct,
}

/// A page that may contain captions for the queried image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub page_url: String,
    pub discovered_via: DiscoveredVia,
}

impl SearchHit {
    pub fn reverse(page_url: impl Into<String>) -> Self {
        Self {
            page_url: page_url.into(),
            discovered_via: DiscoveredVia::ReverseImage,
        }
    }

    pub fn url(&self) -> Result<Url, RetrievalError> {
        Url::parse(&self.page_url)
            .map_err(|e| RetrievalError::ApiFailure(format!("bad hit url {}: {e}", self.page_url)))
    }
}

/// Canonical form for dedup: fragment dropped, scheme/host lowercased,
/// default port removed (the parser does the latter two).
pub fn normalize_url(raw: &str) -> Option<String> {
    let mut url = Url::parse(raw).ok()?;
    url.set_fragment(None);
    Some(url.to_string())
}

pub trait SearchClient: Send + Sync {
    fn search(&self, image_ref: &str, limit: usize) -> Result<Vec<SearchHit>, RetrievalError>;
}

/// Searches for pages containing the image, deduplicated by normalized URL
/// and truncated to `limit`.
pub fn reverse_image_search(
    client: &dyn SearchClient,
    image_ref: &str,
    limit: usize,
) -> Result<Vec<SearchHit>, RetrievalError> {
    if limit == 0 {
        return Ok(Vec::new());
    }
    let raw = client.search(image_ref, limit)?;
    let mut seen = std::collections::HashSet::new();
    let mut hits = Vec::new();
    for hit in raw {
        let Some(normalized) = normalize_url(&hit.page_url) else {
            log::debug!("dropping unparseable hit url {}", hit.page_url);
            continue;
        };
        if !seen.insert(normalized.clone()) {
            continue;
        }
        hits.push(SearchHit {
            page_url: normalized,
            discovered_via: hit.discovered_via,
        });
        if hits.len() == limit {
            break;
        }
    }
    Ok(hits)
}

/// Path of the saved search response for an image ref.
pub fn fixture_search_file(dir: &Path, image_ref: &str) -> PathBuf {
    let hash = crate::util::content_hash(image_ref.as_bytes());
    dir.join("search").join(format!("{}.json", &hash[..16]))
}

#[derive(Debug, Deserialize)]
struct FixtureSearchResponse {
    hits: Vec<String>,
}

/// Replays saved search responses; used for tests and offline runs.
pub struct FixtureSearchClient {
    dir: PathBuf,
    calls: AtomicUsize,
}

impl FixtureSearchClient {
    pub fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SearchClient for FixtureSearchClient {
    fn search(&self, image_ref: &str, _limit: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = fixture_search_file(&self.dir, image_ref);
        let raw = std::fs::read_to_string(&path).map_err(|_| {
            RetrievalError::ApiFailure(format!("no saved search response for {image_ref:?}"))
        })?;
        let parsed: FixtureSearchResponse = serde_json::from_str(&raw).map_err(|e| {
            RetrievalError::ApiFailure(format!("bad fixture {}: {e}", path.display()))
        })?;
        Ok(parsed.hits.into_iter().map(SearchHit::reverse).collect())
    }
}

/// Web-detection API client. Local image paths are inlined as base64; URLs
/// are passed by reference.
pub struct VisionSearchClient {
    endpoint: String,
    api_key_env: String,
    timeout_ms: u64,
    client: reqwest::blocking::Client,
}

impl VisionSearchClient {
    pub fn new(endpoint: String, api_key_env: String, timeout_ms: u64) -> Self {
        Self {
            endpoint,
            api_key_env,
            timeout_ms,
            client: reqwest::blocking::Client::new(),
        }
    }

    fn image_payload(&self, image_ref: &str) -> Result<serde_json::Value, RetrievalError> {
        if image_ref.starts_with("http://") || image_ref.starts_with("https://") {
            return Ok(serde_json::json!({"source": {"imageUri": image_ref}}));
        }
        let bytes = std::fs::read(image_ref)
            .map_err(|e| RetrievalError::ImageUnreadable(format!("{image_ref}: {e}")))?;
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(serde_json::json!({ "content": encoded }))
    }
}

impl SearchClient for VisionSearchClient {
    fn search(&self, image_ref: &str, limit: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            RetrievalError::ApiFailure(format!("env var {} not set", self.api_key_env))
        })?;
        let body = serde_json::json!({
            "requests": [{
                "image": self.image_payload(image_ref)?,
                "features": [{"type": "WEB_DETECTION", "maxResults": limit}],
            }]
        });
        let url = format!("{}?key={key}", self.endpoint);
        let resp = self
            .client
            .post(&url)
            .timeout(std::time::Duration::from_millis(self.timeout_ms))
            .json(&body)
            .send()
            .map_err(|e| RetrievalError::ApiFailure(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(RetrievalError::QuotaExceeded);
        }
        if !(200..300).contains(&status) {
            return Err(RetrievalError::ApiFailure(format!("status {status}")));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| RetrievalError::ApiFailure(e.to_string()))?;
        let pages = value
            .pointer("/responses/0/webDetection/pagesWithMatchingImages")
            .and_then(|p| p.as_array())
            .cloned()
            .unwrap_or_default();
        Ok(pages
            .iter()
            .filter_map(|p| p.get("url").and_then(|u| u.as_str()))
            .map(SearchHit::reverse)
            .collect())
    }
}
