//! Stage composition: retrieval → selection → rewrite → judgment, driven by
//! stage flags, with a full audit record per pair.
//!
//! Flag semantics for the evidence text handed to the judgment prompt:
//! no `er` means no evidence block at all; `er` alone passes every scraped
//! caption through; adding `aesp` narrows that to the selected caption(s);
//! adding `aegp` replaces them with the generated alignment sentence. The
//! `re` flag asks the judge for a rationale after a negative verdict.

use crate::backend::{ChatBackend, EmbedBackend};
use crate::data::{Dataset, DetectionQuery, ImageTextPair, Label};
use crate::detector::{build_detection_prompt, parse_judgment, Judgment, ParseStatus};
use crate::error::{ConfigError, DetectError, Stage};
use crate::rerank::{RerankConfig, SelectionResult, Strategy};
use crate::retrieval::Retriever;
use crate::rewrite::{generate_alignment, AlignmentSentence, RewriteConfig, RewriteSource};
use crate::templates::TemplateSet;
use crate::util::{run_pool, Clock};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

/// Which pipeline stages run. Later stages require the earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub er: bool,
    pub aesp: bool,
    pub aegp: bool,
    pub re: bool,
}

impl StageFlags {
    pub fn all() -> Self {
        Self {
            er: true,
            aesp: true,
            aegp: true,
            re: true,
        }
    }

    pub fn none() -> Self {
        Self {
            er: false,
            aesp: false,
            aegp: false,
            re: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.aesp && !self.er {
            return Err(ConfigError::new("flags.aesp", "selection requires er"));
        }
        if self.aegp && !self.aesp {
            return Err(ConfigError::new("flags.aegp", "rewriting requires aesp"));
        }
        Ok(())
    }
}

impl Default for StageFlags {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub flags: StageFlags,
    pub rerank: RerankConfig,
    pub rewrite: RewriteConfig,
    /// Regeneration cap for the instruction-dataset verification loop.
    pub verify_max_retries: u32,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            flags: StageFlags::all(),
            rerank: RerankConfig::default(),
            rewrite: RewriteConfig::default(),
            verify_max_retries: 5,
            workers: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.flags.validate()?;
        self.rerank.validate()?;
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// Builds the query wrapper handed to selection and rewrite prompts.
pub fn render_query(pair: &ImageTextPair, templates: &TemplateSet) -> DetectionQuery {
    let instruction_text = templates.render("query", &[("caption", pair.caption_text.as_str())]);
    DetectionQuery::new(pair.clone(), instruction_text)
        .expect("query template embeds the caption verbatim")
}

// --- run records -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalRecord {
    pub n_items: usize,
    pub cache_hit: bool,
    pub fallback_used: bool,
    pub captions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub describe_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub describe_reply: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RerankRecord {
    pub strategy: Strategy,
    pub chosen_indices: Vec<usize>,
    pub attempts: u32,
    pub prompt: Option<String>,
    pub raw_model_output: Option<String>,
    pub selected_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RewriteRecord {
    pub prompt: String,
    pub sentence: String,
    pub source_index: i64,
    pub attempts: u32,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JudgeRecord {
    pub prompt: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct StageRecords {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank: Option<RerankRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<RewriteRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeRecord>,
}

/// Full audit trail for one pair: every prompt, every raw reply.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub pair_id: String,
    pub stages: StageRecords,
    pub verdict: Option<Label>,
    pub rationale: Option<String>,
    pub parse_status: ParseStatus,
    pub timings_ms: BTreeMap<String, u64>,
}

/// One pair's outcome, carrying the judgment for scoring and the record for
/// the audit file. `error` is set when a stage failed irrecoverably; such
/// pairs score as incorrect.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub pair_id: String,
    pub truth: Option<Label>,
    pub judgment: Judgment,
    pub record: RunRecord,
    pub error: Option<String>,
}

// --- pipeline --------------------------------------------------------------

/// The composition root for one configuration: owns backends, retriever,
/// templates, and a clock. Cheap to re-flag for ablation rows because all
/// parts are shared behind `Arc`.
#[derive(Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    chat: Arc<dyn ChatBackend>,
    embed: Option<Arc<dyn EmbedBackend>>,
    retriever: Option<Arc<Retriever>>,
    templates: Arc<TemplateSet>,
    clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        chat: Arc<dyn ChatBackend>,
        embed: Option<Arc<dyn EmbedBackend>>,
        retriever: Option<Arc<Retriever>>,
        templates: Arc<TemplateSet>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if cfg.flags.er && retriever.is_none() {
            return Err(ConfigError::new(
                "flags.er",
                "retrieval enabled but no retriever configured",
            ));
        }
        Ok(Self {
            cfg,
            chat,
            embed,
            retriever,
            templates,
            clock,
        })
    }

    /// Same pipeline with different stage flags (ablation rows).
    pub fn with_flags(&self, flags: StageFlags) -> Result<Self, ConfigError> {
        let mut cfg = self.cfg.clone();
        cfg.flags = flags;
        Self::new(
            cfg,
            Arc::clone(&self.chat),
            self.embed.clone(),
            self.retriever.clone(),
            Arc::clone(&self.templates),
            Arc::clone(&self.clock),
        )
    }

    /// Same pipeline with a different selection strategy / top-k.
    pub fn with_rerank(&self, rerank: RerankConfig) -> Result<Self, ConfigError> {
        let mut cfg = self.cfg.clone();
        cfg.rerank = rerank;
        Self::new(
            cfg,
            Arc::clone(&self.chat),
            self.embed.clone(),
            self.retriever.clone(),
            Arc::clone(&self.templates),
            Arc::clone(&self.clock),
        )
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn chat_backend(&self) -> &dyn ChatBackend {
        self.chat.as_ref()
    }

    pub fn embed_backend(&self) -> Option<&dyn EmbedBackend> {
        self.embed.as_deref()
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    /// Runs evidence stages per flags and returns the evidence text for the
    /// judgment prompt (None when `er` is off), recording into `stages` and
    /// `timings`.
    fn evidence_stages(
        &self,
        pair: &ImageTextPair,
        query: &DetectionQuery,
        stages: &mut StageRecords,
        timings: &mut BTreeMap<String, u64>,
    ) -> Result<Option<String>, DetectError> {
        let flags = self.cfg.flags;
        if !flags.er {
            return Ok(None);
        }
        let retriever = self
            .retriever
            .as_ref()
            .expect("validated: er implies retriever");

        let t = self.clock.monotonic_ms();
        let (evidence, trace) = retriever
            .retrieve(pair, self.chat.as_ref(), &self.templates)
            .map_err(|e| DetectError::new(Stage::Retrieval, e))?;
        timings.insert("retrieval".into(), self.clock.elapsed_ms(t));
        stages.retrieval = Some(RetrievalRecord {
            n_items: evidence.c_range(),
            cache_hit: trace.cache_hit,
            fallback_used: evidence.fallback_description.is_some(),
            captions: evidence.captions().map(str::to_owned).collect(),
            describe_prompt: trace.describe_prompt,
            describe_reply: trace.describe_reply,
        });

        if !flags.aesp {
            // raw pass-through: every caption, or the described image
            let text = if evidence.items.is_empty() {
                evidence.fallback_description.clone()
            } else {
                Some(evidence.captions().collect::<Vec<_>>().join(" | "))
            };
            return Ok(text);
        }

        // selection; an empty evidence set skips it and passes the
        // description through as the pseudo-selected item
        let source = if evidence.items.is_empty() {
            match &evidence.fallback_description {
                Some(description) => RewriteSource::Fallback {
                    description: description.clone(),
                },
                None => return Ok(None),
            }
        } else {
            let t = self.clock.monotonic_ms();
            let selection = crate::rerank::select(
                query,
                &evidence,
                &self.cfg.rerank,
                self.chat.as_ref(),
                self.embed.as_deref(),
                &self.templates,
            )
            .map_err(|e| DetectError::new(Stage::Rerank, e))?;
            timings.insert("rerank".into(), self.clock.elapsed_ms(t));
            let selected_text = crate::rerank::selected_captions(&evidence, &selection);
            let prompt = if evidence.c_range() > 1 {
                crate::rerank::build_selection_prompt(
                    query,
                    &evidence,
                    self.cfg.rerank.top_k,
                    &self.templates,
                )
                .ok()
                .map(|req| req.last_user_text().to_string())
            } else {
                None
            };
            stages.rerank = Some(RerankRecord {
                strategy: selection.strategy,
                chosen_indices: selection.chosen_indices.clone(),
                attempts: selection.attempts,
                prompt,
                raw_model_output: selection.raw_model_output.clone(),
                selected_text: selected_text.clone(),
            });
            RewriteSource::Selected {
                text: selected_text,
                source_index: selection.chosen_indices[0],
            }
        };

        if !flags.aegp {
            return Ok(Some(source.text().to_string()));
        }

        let t = self.clock.monotonic_ms();
        let (sentence, prompt) = generate_alignment(
            query,
            &source,
            &self.cfg.rewrite,
            self.chat.as_ref(),
            &self.templates,
        );
        timings.insert("rewrite".into(), self.clock.elapsed_ms(t));
        stages.rewrite = Some(RewriteRecord {
            prompt,
            sentence: sentence.text.clone(),
            source_index: sentence.source_index,
            attempts: sentence.attempts,
            degraded: sentence.degraded,
        });
        Ok(Some(sentence.text))
    }

    /// Full detection for one pair.
    pub fn detect_pair(&self, pair: &ImageTextPair) -> Result<PairOutcome, DetectError> {
        let total_start = self.clock.monotonic_ms();
        let mut stages = StageRecords::default();
        let mut timings = BTreeMap::new();
        let query = render_query(pair, &self.templates);

        let evidence_text = self.evidence_stages(pair, &query, &mut stages, &mut timings)?;

        let t = self.clock.monotonic_ms();
        let req = build_detection_prompt(
            pair,
            evidence_text.as_deref(),
            self.cfg.flags.er,
            self.cfg.flags.re,
            &self.templates,
        );
        let resp = self
            .chat
            .chat(&req)
            .map_err(|e| DetectError::new(Stage::Judge, e))?;
        timings.insert("judge".into(), self.clock.elapsed_ms(t));
        let judgment = parse_judgment(&resp.text);
        stages.judge = Some(JudgeRecord {
            prompt: req.last_user_text().to_string(),
            raw_output: resp.text.clone(),
        });
        timings.insert("total".into(), self.clock.elapsed_ms(total_start));

        let record = RunRecord {
            pair_id: pair.pair_id.clone(),
            stages,
            verdict: judgment.verdict,
            rationale: judgment.rationale.clone(),
            parse_status: judgment.parse_status,
            timings_ms: timings,
        };
        Ok(PairOutcome {
            pair_id: pair.pair_id.clone(),
            truth: pair.truth,
            judgment,
            record,
            error: None,
        })
    }

    /// Direct evidence retrieval for one pair, cache-first.
    pub fn retrieve_for(
        &self,
        pair: &ImageTextPair,
    ) -> Result<
        (
            crate::retrieval::EvidenceSet,
            crate::retrieval::RetrievalTrace,
        ),
        DetectError,
    > {
        let retriever = self.retriever.as_ref().ok_or_else(|| {
            DetectError::new(
                Stage::Retrieval,
                ConfigError::new("retriever", "not configured"),
            )
        })?;
        retriever
            .retrieve(pair, self.chat.as_ref(), &self.templates)
            .map_err(|e| DetectError::new(Stage::Retrieval, e))
    }

    /// Runs alignment-sentence construction only (retrieval → selection →
    /// rewrite), for the instruction-dataset builder. Requires er+aesp+aegp.
    pub fn prepare_alignment(
        &self,
        pair: &ImageTextPair,
    ) -> Result<(DetectionQuery, AlignmentSentence), DetectError> {
        let query = render_query(pair, &self.templates);
        let retriever = self.retriever.as_ref().ok_or_else(|| {
            DetectError::new(
                Stage::Retrieval,
                ConfigError::new("retriever", "not configured"),
            )
        })?;
        let (evidence, _trace) = retriever
            .retrieve(pair, self.chat.as_ref(), &self.templates)
            .map_err(|e| DetectError::new(Stage::Retrieval, e))?;

        let source = if evidence.items.is_empty() {
            let description = evidence.fallback_description.clone().ok_or_else(|| {
                DetectError::new(
                    Stage::Retrieval,
                    crate::error::RetrievalError::ApiFailure(
                        "no evidence and no fallback description".into(),
                    ),
                )
            })?;
            RewriteSource::Fallback { description }
        } else {
            let selection: SelectionResult = crate::rerank::select(
                &query,
                &evidence,
                &self.cfg.rerank,
                self.chat.as_ref(),
                self.embed.as_deref(),
                &self.templates,
            )
            .map_err(|e| DetectError::new(Stage::Rerank, e))?;
            RewriteSource::Selected {
                text: crate::rerank::selected_captions(&evidence, &selection),
                source_index: selection.chosen_indices[0],
            }
        };
        let (sentence, _prompt) = generate_alignment(
            &query,
            &source,
            &self.cfg.rewrite,
            self.chat.as_ref(),
            &self.templates,
        );
        Ok((query, sentence))
    }

    /// Runs detection over a whole dataset on the bounded worker pool.
    /// Output order follows dataset order; stage errors become failed-parse
    /// outcomes so one bad pair never aborts a run.
    pub fn run_dataset(&self, dataset: &Dataset) -> Vec<PairOutcome> {
        run_pool(&dataset.pairs, self.cfg.workers, |_, pair| {
            match self.detect_pair(pair) {
                Ok(outcome) => outcome,
                Err(err) => {
                    log::error!("pair {} failed: {err}", pair.pair_id);
                    let message = err.to_string();
                    PairOutcome {
                        pair_id: pair.pair_id.clone(),
                        truth: pair.truth,
                        judgment: Judgment::failed(format!("<{message}>")),
                        record: RunRecord {
                            pair_id: pair.pair_id.clone(),
                            stages: StageRecords::default(),
                            verdict: None,
                            rationale: None,
                            parse_status: ParseStatus::Failed,
                            timings_ms: BTreeMap::new(),
                        },
                        error: Some(message),
                    }
                }
            }
        })
    }
}

/// Writes run records as JSONL, one record per pair in input order.
pub fn write_run_records(path: &Path, outcomes: &[PairOutcome]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for outcome in outcomes {
        let line = serde_json::to_string(&outcome.record).expect("run record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn load_run_records(path: &Path) -> std::io::Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        records.push(record);
    }
    Ok(records)
}
