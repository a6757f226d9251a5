//! Evidence retrieval: reverse-image search, caption scraping, caching, and
//! the describe-image fallback used when the web yields no captions.

mod cache;
mod crawl;
mod search;

pub use cache::EvidenceCache;
pub use crawl::{
    extract_captions, fixture_page_file, fixture_robots_file, Crawler, FetchedPage, FixtureFetcher,
    HttpFetcher, PageFetcher,
};
pub use search::{
    fixture_search_file, normalize_url, reverse_image_search, DiscoveredVia, FixtureSearchClient,
    SearchClient, SearchHit, VisionSearchClient,
};

use crate::backend::{ChatBackend, ChatMessage, ChatRequest};
use crate::data::ImageTextPair;
use crate::error::RetrievalError;
use crate::templates::TemplateSet;
use crate::util::Clock;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One scraped caption with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub source_url: String,
    pub caption: String,
    pub retrieval_rank: usize,
    pub fetched_at: DateTime<Utc>,
}

/// The ordered evidence retrieved for one pair. When no caption could be
/// scraped, `fallback_description` holds a model-written description of the
/// image instead and `items` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub pair_id: String,
    pub items: Vec<EvidenceItem>,
    pub fallback_description: Option<String>,
}

impl EvidenceSet {
    pub fn new(
        pair_id: impl Into<String>,
        items: Vec<EvidenceItem>,
        fallback_description: Option<String>,
    ) -> Self {
        let set = Self {
            pair_id: pair_id.into(),
            items,
            fallback_description,
        };
        debug_assert!(set.ranks_are_contiguous(), "evidence ranks must be 0..n");
        set
    }

    /// Number of retrieved captions (the reranker's index range).
    pub fn c_range(&self) -> usize {
        self.items.len()
    }

    pub fn ranks_are_contiguous(&self) -> bool {
        self.items
            .iter()
            .enumerate()
            .all(|(i, item)| item.retrieval_rank == i)
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.caption.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Maximum evidence items kept per pair.
    pub limit: usize,
    /// Captions longer than this are truncated at a word boundary.
    pub caption_max_chars: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            limit: 10,
            caption_max_chars: 500,
        }
    }
}

/// What actually happened during one retrieval, for run records.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub cache_hit: bool,
    pub pages_visited: usize,
    pub describe_prompt: Option<String>,
    pub describe_reply: Option<String>,
}

/// Collapses whitespace runs and trims; the caption equality key also
/// case-folds.
pub fn normalize_caption(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dedup_key(caption: &str) -> String {
    caption.to_lowercase()
}

/// Truncates to at most `max_chars` characters, cutting at a word boundary
/// and appending an ellipsis marker.
pub fn cap_caption(caption: &str, max_chars: usize) -> String {
    if caption.chars().count() <= max_chars {
        return caption.to_string();
    }
    let head: String = caption.chars().take(max_chars.saturating_sub(1)).collect();
    let cut = head.rfind(' ').unwrap_or(head.len());
    let mut out = head[..cut].trim_end().to_string();
    out.push('…');
    out
}

/// Evidence retrieval pipeline: cache → search → scrape → rank, with the
/// describe-image fallback when nothing was scraped.
pub struct Retriever {
    search: Arc<dyn SearchClient>,
    crawler: Crawler,
    cache: EvidenceCache,
    cfg: RetrievalConfig,
    clock: Arc<dyn Clock>,
}

impl Retriever {
    pub fn new(
        search: Arc<dyn SearchClient>,
        crawler: Crawler,
        cache: EvidenceCache,
        cfg: RetrievalConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            search,
            crawler,
            cache,
            cfg,
            clock,
        }
    }

    pub fn cache(&self) -> &EvidenceCache {
        &self.cache
    }

    /// Retrieves evidence for a pair. A warm cache short-circuits all
    /// external calls; a corrupt entry is quarantined and re-fetched.
    /// Retrieval failures only propagate when the describe fallback also
    /// fails.
    pub fn retrieve(
        &self,
        pair: &ImageTextPair,
        chat: &dyn ChatBackend,
        templates: &TemplateSet,
    ) -> Result<(EvidenceSet, RetrievalTrace), RetrievalError> {
        match self.cache.get(&pair.pair_id) {
            Ok(Some(set)) => {
                return Ok((
                    set,
                    RetrievalTrace {
                        cache_hit: true,
                        ..Default::default()
                    },
                ))
            }
            Ok(None) => {}
            Err(RetrievalError::CorruptEntry { pair_id }) => {
                log::warn!("cache entry for {pair_id} was corrupt; re-fetching");
            }
            Err(other) => return Err(other),
        }

        let mut trace = RetrievalTrace::default();
        let mut search_failure: Option<RetrievalError> = None;
        let hits = match reverse_image_search(self.search.as_ref(), &pair.image_ref, self.cfg.limit)
        {
            Ok(hits) => hits,
            Err(err) => {
                log::warn!("search failed for {}: {err}", pair.pair_id);
                search_failure = Some(err);
                Vec::new()
            }
        };

        let mut items: Vec<EvidenceItem> = Vec::new();
        let mut seen_keys = std::collections::HashSet::new();
        'hits: for hit in &hits {
            trace.pages_visited += 1;
            let scraped = match self.crawler.scrape_captions(hit) {
                Ok(scraped) => scraped,
                Err(err) => {
                    log::debug!("scrape failed for {}: {err}", hit.page_url);
                    continue;
                }
            };
            for item in scraped {
                let capped = cap_caption(&item.caption, self.cfg.caption_max_chars);
                if !seen_keys.insert(dedup_key(&capped)) {
                    continue; // first occurrence keeps the best rank
                }
                items.push(EvidenceItem {
                    source_url: item.source_url,
                    caption: capped,
                    retrieval_rank: items.len(),
                    fetched_at: item.fetched_at,
                });
                if items.len() == self.cfg.limit {
                    break 'hits;
                }
            }
        }

        let fallback_description = if items.is_empty() {
            match self.describe_image(pair, chat, templates, &mut trace) {
                Ok(description) => Some(description),
                Err(describe_err) => {
                    return Err(search_failure.unwrap_or(describe_err));
                }
            }
        } else {
            None
        };

        let set = EvidenceSet::new(pair.pair_id.clone(), items, fallback_description);
        self.cache.put(&set)?;
        Ok((set, trace))
    }

    fn describe_image(
        &self,
        pair: &ImageTextPair,
        chat: &dyn ChatBackend,
        templates: &TemplateSet,
        trace: &mut RetrievalTrace,
    ) -> Result<String, RetrievalError> {
        let prompt = templates.render("describe", &[]);
        let req = ChatRequest::new(
            vec![ChatMessage::user(&prompt).with_image(&pair.image_ref)],
            0.0,
            "describe",
        );
        trace.describe_prompt = Some(prompt);
        let resp = chat.chat(&req)?;
        trace.describe_reply = Some(resp.text.clone());
        let description = normalize_caption(&resp.text);
        if description.is_empty() {
            return Err(RetrievalError::ApiFailure(
                "describe fallback returned empty text".into(),
            ));
        }
        let _ = self.clock.monotonic_ms();
        Ok(description)
    }
}
