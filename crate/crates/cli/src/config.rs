//! File configuration (TOML or JSON) and its resolution into an engine
//! pipeline, including mock activation and CLI flag overrides.

use ooc_engine::backend::{
    install_mock, BackendConfig, ChatBackend, EmbedBackend, HttpBackend, MockScript,
};
use ooc_engine::error::ConfigError;
use ooc_engine::pipeline::{Pipeline, PipelineConfig, StageFlags};
use ooc_engine::rerank::RerankConfig;
use ooc_engine::retrieval::{
    Crawler, EvidenceCache, FixtureFetcher, FixtureSearchClient, HttpFetcher, RetrievalConfig,
    Retriever, SearchClient, VisionSearchClient,
};
use ooc_engine::rewrite::RewriteConfig;
use ooc_engine::templates::TemplateSet;
use ooc_engine::util::{Clock, FixedClock, SystemClock};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    #[default]
    None,
    Fixture,
    Vision,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SearchSection {
    #[serde(default)]
    pub kind: SearchKind,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_search_timeout")]
    pub timeout_ms: u64,
}

fn default_search_timeout() -> u64 {
    20_000
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifySection {
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            max_retries: 5,
            temperature: 0.7,
        }
    }
}

/// The on-disk configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FileConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub flags: FlagsSection,
    #[serde(default)]
    pub chat: Option<BackendConfig>,
    #[serde(default)]
    pub embed: Option<BackendConfig>,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub rewrite: RewriteSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_workers() -> usize {
    4
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("evidence-cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlagsSection {
    pub er: bool,
    pub aesp: bool,
    pub aegp: bool,
    pub re: bool,
}

impl Default for FlagsSection {
    fn default() -> Self {
        Self {
            er: true,
            aesp: true,
            aegp: true,
            re: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalSection {
    pub limit: usize,
    pub caption_max_chars: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            limit: 10,
            caption_max_chars: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewriteSection {
    pub max_retries: u32,
    pub max_chars: usize,
    pub temperature: f64,
}

impl Default for RewriteSection {
    fn default() -> Self {
        let d = RewriteConfig::default();
        Self {
            max_retries: d.max_retries,
            max_chars: d.max_chars,
            temperature: d.temperature,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
        if is_json {
            serde_json::from_str(&raw).map_err(|e| ConfigError::new("config", e.to_string()))
        } else {
            toml::from_str(&raw).map_err(|e| ConfigError::new("config", e.to_string()))
        }
    }
}

/// Per-invocation overrides collected from CLI flags.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub strategy: Option<ooc_engine::rerank::Strategy>,
    pub top_k: Option<usize>,
    pub max_parse_retries: Option<u32>,
    pub er: Option<bool>,
    pub aesp: Option<bool>,
    pub aegp: Option<bool>,
    pub re: Option<bool>,
    pub backend_url: Option<String>,
    pub embed_url: Option<String>,
    pub api_key_env: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// Everything a command needs to run.
pub struct Setup {
    pub pipeline: Pipeline,
    pub cfg: FileConfig,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub verify: VerifySection,
}

fn apply_overrides(cfg: &mut FileConfig, over: &Overrides) {
    if let Some(seed) = over.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = over.workers {
        cfg.workers = workers;
    }
    if let Some(strategy) = over.strategy {
        cfg.rerank.strategy = strategy;
    }
    if let Some(top_k) = over.top_k {
        cfg.rerank.top_k = top_k;
    }
    if let Some(retries) = over.max_parse_retries {
        cfg.rerank.max_parse_retries = retries;
    }
    if let Some(er) = over.er {
        cfg.flags.er = er;
    }
    if let Some(aesp) = over.aesp {
        cfg.flags.aesp = aesp;
    }
    if let Some(aegp) = over.aegp {
        cfg.flags.aegp = aegp;
    }
    if let Some(re) = over.re {
        cfg.flags.re = re;
    }
    if let Some(url) = &over.backend_url {
        if let Some(chat) = &mut cfg.chat {
            chat.base_url = url.clone();
        }
    }
    if let Some(url) = &over.embed_url {
        if let Some(embed) = &mut cfg.embed {
            embed.base_url = url.clone();
        }
    }
    if let Some(env) = &over.api_key_env {
        if let Some(chat) = &mut cfg.chat {
            chat.api_key_env = env.clone();
        }
    }
    if let Some(out) = &over.out {
        cfg.output_dir = out.clone();
    }
    if let Some(cache) = &over.cache_dir {
        cfg.cache_dir = cache.clone();
    }
}

fn build_search_client(section: &SearchSection) -> Result<Arc<dyn SearchClient>, ConfigError> {
    match section.kind {
        SearchKind::None => Ok(Arc::new(UnconfiguredSearch)),
        SearchKind::Fixture => {
            let dir = section.fixture_dir.clone().ok_or_else(|| {
                ConfigError::new("search.fixture_dir", "required for fixture search")
            })?;
            Ok(Arc::new(FixtureSearchClient::new(dir)))
        }
        SearchKind::Vision => {
            let endpoint = section
                .endpoint
                .clone()
                .ok_or_else(|| ConfigError::new("search.endpoint", "required for vision search"))?;
            let key_env = section.api_key_env.clone().ok_or_else(|| {
                ConfigError::new("search.api_key_env", "required for vision search")
            })?;
            Ok(Arc::new(VisionSearchClient::new(
                endpoint,
                key_env,
                section.timeout_ms,
            )))
        }
    }
}

/// Placeholder client for cache-only retrieval; any live search attempt
/// reports itself clearly.
struct UnconfiguredSearch;

impl SearchClient for UnconfiguredSearch {
    fn search(
        &self,
        _image_ref: &str,
        _limit: usize,
    ) -> Result<Vec<ooc_engine::retrieval::SearchHit>, ooc_engine::error::RetrievalError> {
        Err(ooc_engine::error::RetrievalError::ApiFailure(
            "no search client configured (search.kind = none)".into(),
        ))
    }
}

/// Resolves file config and overrides into a runnable pipeline.
pub fn build_setup(mut cfg: FileConfig, over: &Overrides) -> Result<Setup, ConfigError> {
    apply_overrides(&mut cfg, over);

    let templates = match &cfg.template_dir {
        Some(dir) => TemplateSet::with_overrides(dir)
            .map_err(|e| ConfigError::new("template_dir", e.to_string()))?,
        None => TemplateSet::builtin(),
    };

    let mocked = over.mock_script.is_some();
    let clock: Arc<dyn Clock> = if mocked {
        Arc::new(FixedClock::epoch())
    } else {
        Arc::new(SystemClock::new())
    };

    let (chat, embed): (Arc<dyn ChatBackend>, Option<Arc<dyn EmbedBackend>>) = match &over
        .mock_script
    {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("mock_script", e.to_string()))?;
            let script: MockScript = serde_json::from_str(&raw)
                .map_err(|e| ConfigError::new("mock_script", e.to_string()))?;
            let mock = Arc::new(
                install_mock(script).map_err(|e| ConfigError::new("mock_script", e.to_string()))?,
            );
            (
                Arc::clone(&mock) as Arc<dyn ChatBackend>,
                Some(mock as Arc<dyn EmbedBackend>),
            )
        }
        None => {
            let chat_cfg = cfg
                .chat
                .clone()
                .ok_or_else(|| ConfigError::new("chat", "missing [chat] backend section"))?;
            let chat = Arc::new(
                HttpBackend::new(chat_cfg).map_err(|e| ConfigError::new("chat", e.to_string()))?,
            ) as Arc<dyn ChatBackend>;
            let embed = match cfg.embed.clone() {
                Some(embed_cfg) => Some(Arc::new(
                    HttpBackend::new(embed_cfg)
                        .map_err(|e| ConfigError::new("embed", e.to_string()))?,
                ) as Arc<dyn EmbedBackend>),
                None => None,
            };
            (chat, embed)
        }
    };

    let retriever = {
        let cache = EvidenceCache::new(cfg.cache_dir.clone())
            .map_err(|e| ConfigError::new("cache_dir", e.to_string()))?;
        let search = build_search_client(&cfg.search)?;
        let fetcher: Box<dyn ooc_engine::retrieval::PageFetcher> = match &cfg.search.kind {
            SearchKind::Fixture => {
                let dir = cfg.search.fixture_dir.clone().expect("validated above");
                Box::new(FixtureFetcher::new(dir))
            }
            _ => Box::new(HttpFetcher::new()),
        };
        let crawler = Crawler::new(fetcher, Arc::clone(&clock));
        Retriever::new(
            search,
            crawler,
            cache,
            RetrievalConfig {
                limit: cfg.retrieval.limit,
                caption_max_chars: cfg.retrieval.caption_max_chars,
            },
            Arc::clone(&clock),
        )
    };

    let pipeline_cfg = PipelineConfig {
        flags: StageFlags {
            er: cfg.flags.er,
            aesp: cfg.flags.aesp,
            aegp: cfg.flags.aegp,
            re: cfg.flags.re,
        },
        rerank: RerankConfig {
            seed: cfg.seed,
            ..cfg.rerank.clone()
        },
        rewrite: RewriteConfig {
            max_retries: cfg.rewrite.max_retries,
            max_chars: cfg.rewrite.max_chars,
            temperature: cfg.rewrite.temperature,
        },
        verify_max_retries: cfg.verify.max_retries,
        workers: cfg.workers,
        seed: cfg.seed,
    };

    let pipeline = Pipeline::new(
        pipeline_cfg,
        chat,
        embed,
        Some(Arc::new(retriever)),
        Arc::new(templates),
        clock,
    )?;

    Ok(Setup {
        output_dir: cfg.output_dir.clone(),
        cache_dir: cfg.cache_dir.clone(),
        verify: cfg.verify,
        pipeline,
        cfg,
    })
}
