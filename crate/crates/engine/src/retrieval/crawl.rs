//! Polite page crawling and caption extraction.
//!
//! The crawler checks robots.txt before any page fetch and never revisits a
//! host faster than one request per second (live fetcher). Caption
//! candidates are extracted in a fixed priority: image alt text, figure
//! captions, page title, then meta description.

use super::{normalize_caption, EvidenceItem, SearchHit};
use crate::error::RetrievalError;
use crate::util::Clock;
use scraper::{Html, Selector};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use url::Url;

pub const CRAWLER_USER_AGENT: &str = "ooc-evidence-crawler/0.1";

#[derive(Debug, Clone)]
pub struct FetchedPage {
    pub status: u16,
    pub content_type: String,
    pub body: String,
}

/// One raw fetch, no policy. Robots checking lives above this trait so the
/// fixture fetcher is subject to the same policy as the live one.
pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &Url) -> Result<FetchedPage, RetrievalError>;
}

/// Live fetcher: 10 s timeout, one retry, at most one request per second
/// per host.
pub struct HttpFetcher {
    client: reqwest::blocking::Client,
    timeout: Duration,
    next_slot: Mutex<HashMap<String, Instant>>,
    per_host_interval: Duration,
}

impl HttpFetcher {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .user_agent(CRAWLER_USER_AGENT)
                .build()
                .expect("reqwest client builds"),
            timeout: Duration::from_secs(10),
            next_slot: Mutex::new(HashMap::new()),
            per_host_interval: Duration::from_secs(1),
        }
    }

    fn wait_for_host(&self, host: &str) {
        let slot = {
            let mut slots = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = slots.get(host).copied().map_or(now, |next| next.max(now));
            slots.insert(host.to_string(), slot + self.per_host_interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }

    fn fetch_once(&self, url: &Url) -> Result<FetchedPage, RetrievalError> {
        let resp = self
            .client
            .get(url.as_str())
            .timeout(self.timeout)
            .send()
            .map_err(|e| RetrievalError::ApiFailure(format!("fetch {url}: {e}")))?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let body = resp
            .text()
            .map_err(|e| RetrievalError::ApiFailure(format!("read {url}: {e}")))?;
        Ok(FetchedPage {
            status,
            content_type,
            body,
        })
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &Url) -> Result<FetchedPage, RetrievalError> {
        if let Some(host) = url.host_str() {
            self.wait_for_host(host);
        }
        match self.fetch_once(url) {
            Ok(page) => Ok(page),
            Err(first) => {
                log::debug!("retrying fetch after {first}");
                self.fetch_once(url)
            }
        }
    }
}

/// Path of the saved page body for a URL (`.html`, or `.txt` for non-HTML).
pub fn fixture_page_file(dir: &Path, url: &str) -> PathBuf {
    let hash = crate::util::content_hash(url.as_bytes());
    dir.join("pages").join(format!("{}.html", &hash[..16]))
}

/// Path of the saved robots.txt for a host.
pub fn fixture_robots_file(dir: &Path, host: &str) -> PathBuf {
    dir.join("robots").join(format!("{host}.txt"))
}

/// Serves saved pages from a directory; missing files answer 404. Keeps a
/// log of fetched URLs so tests can assert what was (not) fetched.
pub struct FixtureFetcher {
    dir: PathBuf,
    calls: Arc<AtomicUsize>,
    fetched: Arc<Mutex<Vec<String>>>,
}

impl FixtureFetcher {
    pub fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            calls: Arc::new(AtomicUsize::new(0)),
            fetched: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Shared counter that stays valid after the fetcher moves into a crawler.
    pub fn call_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.calls)
    }

    /// Shared fetch log, same lifetime rules as [`Self::call_counter`].
    pub fn fetch_log(&self) -> Arc<Mutex<Vec<String>>> {
        Arc::clone(&self.fetched)
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &Url) -> Result<FetchedPage, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.fetched.lock().unwrap().push(url.to_string());

        if url.path() == "/robots.txt" {
            let path = fixture_robots_file(&self.dir, url.host_str().unwrap_or("unknown"));
            return match std::fs::read_to_string(path) {
                Ok(body) => Ok(FetchedPage {
                    status: 200,
                    content_type: "text/plain".into(),
                    body,
                }),
                Err(_) => Ok(FetchedPage {
                    status: 404,
                    content_type: "text/plain".into(),
                    body: String::new(),
                }),
            };
        }

        let html_path = fixture_page_file(&self.dir, url.as_str());
        if let Ok(body) = std::fs::read_to_string(&html_path) {
            return Ok(FetchedPage {
                status: 200,
                content_type: "text/html; charset=utf-8".into(),
                body,
            });
        }
        let txt_path = html_path.with_extension("txt");
        if let Ok(body) = std::fs::read_to_string(&txt_path) {
            return Ok(FetchedPage {
                status: 200,
                content_type: "text/plain".into(),
                body,
            });
        }
        Ok(FetchedPage {
            status: 404,
            content_type: "text/html".into(),
            body: String::new(),
        })
    }
}

/// Disallow prefixes applying to this crawler, parsed from robots.txt.
fn parse_robots(body: &str) -> Vec<String> {
    let mut prefixes = Vec::new();
    let mut group_applies = false;
    let mut in_agent_lines = false;
    for line in body.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((field, value)) = line.split_once(':') else {
            continue;
        };
        let field = field.trim().to_ascii_lowercase();
        let value = value.trim();
        match field.as_str() {
            "user-agent" => {
                if !in_agent_lines {
                    // a new group starts; reset applicability
                    group_applies = false;
                }
                in_agent_lines = true;
                let agent = value.to_ascii_lowercase();
                if agent == "*" || CRAWLER_USER_AGENT.to_ascii_lowercase().contains(&agent) {
                    group_applies = true;
                }
            }
            "disallow" => {
                in_agent_lines = false;
                if group_applies && !value.is_empty() {
                    prefixes.push(value.to_string());
                }
            }
            _ => {
                in_agent_lines = false;
            }
        }
    }
    prefixes
}

/// Caption candidates from page markup, in extraction priority order:
/// img alt text, figcaption text, title, meta description. Whitespace is
/// collapsed; entities are decoded by the HTML parser; empties dropped.
pub fn extract_captions(html: &str) -> Vec<String> {
    let doc = Html::parse_document(html);
    let mut captions = Vec::new();

    let img = Selector::parse("img[alt]").unwrap();
    for el in doc.select(&img) {
        if let Some(alt) = el.value().attr("alt") {
            captions.push(normalize_caption(alt));
        }
    }

    let figcaption = Selector::parse("figcaption").unwrap();
    for el in doc.select(&figcaption) {
        captions.push(normalize_caption(&el.text().collect::<String>()));
    }

    let title = Selector::parse("title").unwrap();
    for el in doc.select(&title) {
        captions.push(normalize_caption(&el.text().collect::<String>()));
    }

    let meta = Selector::parse("meta[name=\"description\"]").unwrap();
    for el in doc.select(&meta) {
        if let Some(content) = el.value().attr("content") {
            captions.push(normalize_caption(content));
        }
    }

    captions.retain(|c| !c.is_empty());
    captions
}

/// Robots-respecting page crawler.
pub struct Crawler {
    fetcher: Box<dyn PageFetcher>,
    robots: Mutex<HashMap<String, Vec<String>>>,
    clock: Arc<dyn Clock>,
}

impl Crawler {
    pub fn new(fetcher: Box<dyn PageFetcher>, clock: Arc<dyn Clock>) -> Self {
        Self {
            fetcher,
            robots: Mutex::new(HashMap::new()),
            clock,
        }
    }

    fn disallowed_prefixes(&self, url: &Url) -> Vec<String> {
        let Some(host) = url.host_str() else {
            return Vec::new();
        };
        if let Some(prefixes) = self.robots.lock().unwrap().get(host) {
            return prefixes.clone();
        }
        let mut robots_url = url.clone();
        robots_url.set_path("/robots.txt");
        robots_url.set_query(None);
        robots_url.set_fragment(None);
        let prefixes = match self.fetcher.fetch(&robots_url) {
            Ok(page) if page.status == 200 => parse_robots(&page.body),
            // unreachable or missing robots: nothing is disallowed
            _ => Vec::new(),
        };
        self.robots
            .lock()
            .unwrap()
            .insert(host.to_string(), prefixes.clone());
        prefixes
    }

    fn check_robots(&self, url: &Url) -> Result<(), RetrievalError> {
        let path = url.path();
        for prefix in self.disallowed_prefixes(url) {
            if path.starts_with(&prefix) {
                return Err(RetrievalError::RobotsDisallowed(url.to_string()));
            }
        }
        Ok(())
    }

    /// Fetches one page body, enforcing robots policy and HTML content type.
    pub fn fetch_html(&self, url: &Url) -> Result<String, RetrievalError> {
        self.check_robots(url)?;
        let page = self.fetcher.fetch(url)?;
        if !(200..300).contains(&page.status) {
            return Err(RetrievalError::FetchFailure(page.status));
        }
        let kind = page.content_type.to_ascii_lowercase();
        if !(kind.contains("text/html") || kind.contains("application/xhtml")) {
            return Err(RetrievalError::NonHtmlContent(page.content_type));
        }
        Ok(page.body)
    }

    /// Visits a search hit and extracts caption candidates. An empty result
    /// is valid: not every containing page captions its images.
    pub fn scrape_captions(&self, hit: &SearchHit) -> Result<Vec<EvidenceItem>, RetrievalError> {
        let url = hit.url()?;
        let body = self.fetch_html(&url)?;
        let fetched_at = self.clock.now_utc();
        Ok(extract_captions(&body)
            .into_iter()
            .enumerate()
            .map(|(rank, caption)| EvidenceItem {
                source_url: hit.page_url.clone(),
                caption,
                retrieval_rank: rank,
                fetched_at,
            })
            .collect())
    }
}
