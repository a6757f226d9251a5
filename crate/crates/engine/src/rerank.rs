//! Evidence selection: choose the most relevant retrieved caption(s).
//!
//! The primary strategy asks the model for the bracketed index of the most
//! helpful caption from a numbered list. Cosine similarity over embeddings
//! and a seeded uniform draw serve as baselines for strategy comparisons.
//! Prompt numbering is 1-based; internal indices are 0-based; the parser
//! owns the conversion.

use crate::backend::{ChatBackend, ChatMessage, ChatRequest, EmbedBackend};
use crate::data::DetectionQuery;
use crate::error::RerankError;
use crate::retrieval::EvidenceSet;
use crate::templates::TemplateSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LlmSelect,
    Cosine,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LlmSelect => "llm_select",
            Strategy::Cosine => "cosine",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" | "llm_select" | "llm-select" => Ok(Strategy::LlmSelect),
            "cosine" => Ok(Strategy::Cosine),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Outcome of one selection: 0-based caption indices, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_indices: Vec<usize>,
    pub strategy: Strategy,
    pub raw_model_output: Option<String>,
    pub attempts: u32,
}

impl SelectionResult {
    /// Checks the structural invariants: distinct in-range indices,
    /// exactly min(k, c_range) of them, at least one attempt.
    pub fn check(&self, k: usize, c_range: usize) -> bool {
        let expected = k.min(c_range);
        let distinct: std::collections::HashSet<_> = self.chosen_indices.iter().collect();
        self.chosen_indices.len() == expected
            && distinct.len() == self.chosen_indices.len()
            && self.chosen_indices.iter().all(|&i| i < c_range)
            && self.attempts >= 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub seed: u64,
    pub max_parse_retries: u32,
    pub fallback_strategy: Strategy,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::LlmSelect,
            top_k: 1,
            seed: 0,
            max_parse_retries: 2,
            fallback_strategy: Strategy::Cosine,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if !(1..=3).contains(&self.top_k) {
            return Err(crate::error::ConfigError::new(
                "rerank.top_k",
                format!("must be 1, 2, or 3, got {}", self.top_k),
            ));
        }
        Ok(())
    }
}

/// Renders the numbered-caption selection prompt. Captions are flattened to
/// single lines before numbering; rendering is deterministic.
pub fn build_selection_prompt(
    query: &DetectionQuery,
    evidence: &EvidenceSet,
    top_k: usize,
    templates: &TemplateSet,
) -> Result<ChatRequest, RerankError> {
    if evidence.items.is_empty() {
        return Err(RerankError::EmptyEvidence);
    }
    let captions = evidence
        .captions()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, crate::retrieval::normalize_caption(c)))
        .collect::<Vec<_>>()
        .join("\n");
    let count = evidence.c_range().to_string();
    let text = if top_k <= 1 {
        templates.render(
            "select",
            &[
                ("count", count.as_str()),
                ("captions", captions.as_str()),
                ("query", query.instruction_text.as_str()),
            ],
        )
    } else {
        let k = top_k.min(evidence.c_range()).to_string();
        templates.render(
            "select_ranked",
            &[
                ("count", count.as_str()),
                ("k", k.as_str()),
                ("captions", captions.as_str()),
                ("query", query.instruction_text.as_str()),
            ],
        )
    };
    Ok(ChatRequest::new(
        vec![ChatMessage::user(text)],
        0.0,
        "rerank",
    ))
}

fn bracket_groups(text: &str) -> Vec<Vec<i64>> {
    let group_re = Regex::new(r"\[([^\]]*)\]").unwrap();
    let int_re = Regex::new(r"-?\d+").unwrap();
    group_re
        .captures_iter(text)
        .map(|cap| {
            int_re
                .find_iter(&cap[1])
                .filter_map(|m| m.as_str().parse::<i64>().ok())
                .collect()
        })
        .collect()
}

fn bare_integers(text: &str) -> Vec<i64> {
    let int_re = Regex::new(r"-?\d+").unwrap();
    int_re
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<i64>().ok())
        .collect()
}

fn to_internal(value: i64, c_range: usize) -> Result<usize, RerankError> {
    if value >= 1 && (value as usize) <= c_range {
        Ok(value as usize - 1)
    } else {
        Err(RerankError::OutOfRange {
            parsed: value,
            c_range,
        })
    }
}

/// Extracts the first bracketed caption index and converts it from 1-based
/// prompt numbering to a 0-based internal index. A bare integer outside
/// brackets is accepted as a lenient fallback.
pub fn parse_selection(text: &str, c_range: usize) -> Result<usize, RerankError> {
    assert!(c_range >= 1, "c_range must be at least 1");
    for group in bracket_groups(text) {
        if let Some(&first) = group.first() {
            return to_internal(first, c_range);
        }
    }
    match bare_integers(text).first() {
        Some(&first) => to_internal(first, c_range),
        None => Err(RerankError::NoIndexFound),
    }
}

/// Parses a ranked list of `k` distinct caption indices, preferring
/// bracketed integers and falling back to bare ones. Any out-of-range value
/// fails the parse; duplicates are dropped silently.
pub fn parse_selection_ranked(
    text: &str,
    c_range: usize,
    k: usize,
) -> Result<Vec<usize>, RerankError> {
    assert!(c_range >= 1, "c_range must be at least 1");
    let bracketed: Vec<i64> = bracket_groups(text).into_iter().flatten().collect();
    let candidates = if bracketed.is_empty() {
        bare_integers(text)
    } else {
        bracketed
    };
    if candidates.is_empty() {
        return Err(RerankError::NoIndexFound);
    }
    let mut out = Vec::new();
    for value in candidates {
        let idx = to_internal(value, c_range)?;
        if !out.contains(&idx) {
            out.push(idx);
        }
        if out.len() == k {
            return Ok(out);
        }
    }
    Err(RerankError::NoIndexFound)
}

/// Model-prompted selection with parse retries. On a parse failure the
/// prompt is re-sent with a format reminder appended, up to
/// `max_parse_retries` times; when those are exhausted the configured
/// fallback strategy decides instead (its name is recorded as the
/// provenance). A single caption needs no model call.
pub fn select_llm(
    query: &DetectionQuery,
    evidence: &EvidenceSet,
    cfg: &RerankConfig,
    chat: &dyn ChatBackend,
    embed: Option<&dyn EmbedBackend>,
    templates: &TemplateSet,
) -> Result<SelectionResult, RerankError> {
    if evidence.items.is_empty() {
        return Err(RerankError::EmptyEvidence);
    }
    let c_range = evidence.c_range();
    let k = cfg.top_k.min(c_range);
    if c_range == 1 {
        return Ok(SelectionResult {
            chosen_indices: vec![0],
            strategy: Strategy::LlmSelect,
            raw_model_output: None,
            attempts: 1,
        });
    }

    let base = build_selection_prompt(query, evidence, cfg.top_k, templates)?;
    let reminder_example = if k <= 1 {
        "[1]".to_string()
    } else {
        let sample: Vec<String> = (1..=k).map(|i| i.to_string()).collect();
        format!("[{}]", sample.join(", "))
    };
    let reminder = templates.render("select_retry", &[("example", reminder_example.as_str())]);

    let mut attempts = 0u32;
    let mut last_raw: Option<String> = None;
    let mut last_error = String::new();
    while attempts <= cfg.max_parse_retries {
        let mut req = base.clone();
        if attempts > 0 {
            let last = req.messages.last_mut().expect("prompt has a user message");
            last.text = format!("{}\n\n{}", last.text, reminder);
        }
        attempts += 1;
        match chat.chat(&req) {
            Ok(resp) => {
                last_raw = Some(resp.text.clone());
                let parsed = if k <= 1 {
                    parse_selection(&resp.text, c_range).map(|i| vec![i])
                } else {
                    parse_selection_ranked(&resp.text, c_range, k)
                };
                match parsed {
                    Ok(chosen_indices) => {
                        return Ok(SelectionResult {
                            chosen_indices,
                            strategy: Strategy::LlmSelect,
                            raw_model_output: last_raw,
                            attempts,
                        })
                    }
                    Err(e) => last_error = e.to_string(),
                }
            }
            Err(e) => last_error = e.to_string(),
        }
    }

    log::warn!(
        "selection parse failed after {attempts} attempts ({last_error}); \
         falling back to {}",
        cfg.fallback_strategy.as_str()
    );
    let mut fallback = match cfg.fallback_strategy {
        Strategy::Cosine => match embed {
            Some(embed) => select_cosine(query, evidence, cfg, embed)?,
            None => return Err(RerankError::RetriesExhausted(last_error)),
        },
        Strategy::Random => select_random(evidence, cfg)?,
        Strategy::LlmSelect => return Err(RerankError::RetriesExhausted(last_error)),
    };
    fallback.attempts += attempts;
    fallback.raw_model_output = last_raw;
    Ok(fallback)
}

/// Indices 0..n ranked by descending similarity, ties broken by lower index.
fn rank_by_similarity(similarities: &[f64], k: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..similarities.len()).collect();
    indices.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    indices.truncate(k);
    indices
}

/// Cosine-similarity baseline: one embedding call covering the query
/// caption and every evidence caption, then a deterministic top-k.
pub fn select_cosine(
    query: &DetectionQuery,
    evidence: &EvidenceSet,
    cfg: &RerankConfig,
    embed: &dyn EmbedBackend,
) -> Result<SelectionResult, RerankError> {
    if evidence.items.is_empty() {
        return Err(RerankError::EmptyEvidence);
    }
    let mut texts = vec![query.pair.caption_text.clone()];
    texts.extend(evidence.captions().map(str::to_owned));
    let vectors = embed.embed(&texts)?;
    let (query_vec, caption_vecs) = vectors.split_first().expect("at least the query vector");
    let similarities: Vec<f64> = caption_vecs.iter().map(|v| query_vec.cosine(v)).collect();
    let k = cfg.top_k.min(evidence.c_range());
    Ok(SelectionResult {
        chosen_indices: rank_by_similarity(&similarities, k),
        strategy: Strategy::Cosine,
        raw_model_output: None,
        attempts: 1,
    })
}

/// Seeded uniform draw of k distinct indices. The effective seed is derived
/// from the run seed and the pair id, so results do not depend on the order
/// pairs are processed in.
pub fn select_random(
    evidence: &EvidenceSet,
    cfg: &RerankConfig,
) -> Result<SelectionResult, RerankError> {
    if evidence.items.is_empty() {
        return Err(RerankError::EmptyEvidence);
    }
    let c_range = evidence.c_range();
    let k = cfg.top_k.min(c_range);
    let seed = crate::util::derive_seed(cfg.seed, &evidence.pair_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..c_range).collect();
    indices.shuffle(&mut rng);
    indices.truncate(k);
    Ok(SelectionResult {
        chosen_indices: indices,
        strategy: Strategy::Random,
        raw_model_output: None,
        attempts: 1,
    })
}

/// Dispatches on the configured strategy.
pub fn select(
    query: &DetectionQuery,
    evidence: &EvidenceSet,
    cfg: &RerankConfig,
    chat: &dyn ChatBackend,
    embed: Option<&dyn EmbedBackend>,
    templates: &TemplateSet,
) -> Result<SelectionResult, RerankError> {
    match cfg.strategy {
        Strategy::LlmSelect => select_llm(query, evidence, cfg, chat, embed, templates),
        Strategy::Cosine => match embed {
            Some(embed) => select_cosine(query, evidence, cfg, embed),
            None => Err(RerankError::NoEmbedBackend),
        },
        Strategy::Random => select_random(evidence, cfg),
    }
}

/// The chosen captions rank-ordered and joined with " | " for downstream
/// prompts.
pub fn selected_captions(evidence: &EvidenceSet, selection: &SelectionResult) -> String {
    selection
        .chosen_indices
        .iter()
        .filter_map(|&i| evidence.items.get(i))
        .map(|item| item.caption.as_str())
        .collect::<Vec<_>>()
        .join(" | ")
}
