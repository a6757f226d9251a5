//! Evidence rewriting: turn the selected caption into one alignment
//! sentence that carries its meaning into the judgment prompt.
//!
//! Generation is total: structurally invalid replies (empty, multi-paragraph,
//! instruction echoes) are retried up to a cap, and when everything fails the
//! raw selected caption is passed through, flagged as degraded. Meaning
//! preservation itself is not machine-verified; the (caption, sentence) pair
//! is logged for audit instead.

use crate::backend::{ChatBackend, ChatMessage, ChatRequest};
use crate::data::DetectionQuery;
use crate::retrieval::normalize_caption;
use crate::templates::TemplateSet;
use serde::{Deserialize, Serialize};

/// The generated sentence fed to the judgment prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSentence {
    pub text: String,
    /// Rank-1 selected evidence index, or -1 when the sentence came from a
    /// model-described image instead of a scraped caption.
    pub source_index: i64,
    pub attempts: u32,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteConfig {
    pub max_retries: u32,
    pub max_chars: usize,
    pub temperature: f64,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_chars: 400,
            temperature: 0.7,
        }
    }
}

/// What the rewrite works from.
#[derive(Debug, Clone, PartialEq)]
pub enum RewriteSource {
    /// Selected caption(s), rank-ordered and already joined for top-k > 1.
    Selected { text: String, source_index: usize },
    /// The describe-image fallback output.
    Fallback { description: String },
}

impl RewriteSource {
    pub fn text(&self) -> &str {
        match self {
            RewriteSource::Selected { text, .. } => text,
            RewriteSource::Fallback { description } => description,
        }
    }

    pub fn source_index(&self) -> i64 {
        match self {
            RewriteSource::Selected { source_index, .. } => *source_index as i64,
            RewriteSource::Fallback { .. } => -1,
        }
    }
}

/// Renders the rewrite prompt; the fallback branch flags that the input is
/// model-described image content rather than a scraped caption.
pub fn build_rewrite_prompt(
    query: &DetectionQuery,
    source: &RewriteSource,
    cfg: &RewriteConfig,
    templates: &TemplateSet,
) -> ChatRequest {
    let selected = source.text().trim();
    let template = match source {
        RewriteSource::Selected { .. } => "rewrite",
        RewriteSource::Fallback { .. } => "rewrite_fallback",
    };
    let text = templates.render(
        template,
        &[
            ("selected", selected),
            ("query", query.instruction_text.as_str()),
        ],
    );
    ChatRequest::new(vec![ChatMessage::user(text)], cfg.temperature, "rewrite")
}

/// Cuts to at most `max_chars` characters, preferring a sentence boundary,
/// then a word boundary.
fn truncate_sentence(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let head: String = text.chars().take(max_chars).collect();
    if let Some(cut) = head.rfind(['.', '!', '?']) {
        let candidate = head[..=cut].trim_end();
        if !candidate.is_empty() {
            return candidate.to_string();
        }
    }
    let head: String = text.chars().take(max_chars.saturating_sub(1)).collect();
    let cut = head.rfind(' ').unwrap_or(head.len());
    let mut out = head[..cut].trim_end().to_string();
    out.push('…');
    out
}

/// Rejects replies that cannot serve as an alignment sentence.
fn structurally_valid(reply: &str) -> bool {
    let trimmed = reply.trim();
    if trimmed.is_empty() {
        return false;
    }
    // multi-paragraph replies are not a single sentence
    if trimmed.contains("\n\n") {
        return false;
    }
    // instruction echoes: the model copied the prompt instead of answering
    const ECHO_MARKERS: [&str; 3] = [
        "Evidence rewriting task",
        "Reply with exactly one sentence",
        "Selected caption:",
    ];
    !ECHO_MARKERS.iter().any(|marker| trimmed.contains(marker))
}

/// Generates the alignment sentence. Never fails: backend errors and
/// persistently invalid replies degrade to the raw selected text.
pub fn generate_alignment(
    query: &DetectionQuery,
    source: &RewriteSource,
    cfg: &RewriteConfig,
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
) -> (AlignmentSentence, String) {
    let req = build_rewrite_prompt(query, source, cfg, templates);
    let prompt = req.last_user_text().to_string();

    let mut attempts = 0u32;
    while attempts <= cfg.max_retries {
        attempts += 1;
        match chat.chat(&req) {
            Ok(resp) if structurally_valid(&resp.text) => {
                let text = truncate_sentence(&normalize_caption(&resp.text), cfg.max_chars);
                log::debug!(
                    "rewrite ok for {}: {:?} -> {:?}",
                    query.pair.pair_id,
                    source.text(),
                    text
                );
                return (
                    AlignmentSentence {
                        text,
                        source_index: source.source_index(),
                        attempts,
                        degraded: false,
                    },
                    prompt,
                );
            }
            Ok(resp) => {
                log::debug!(
                    "rewrite attempt {attempts} structurally invalid: {:?}",
                    resp.text
                );
            }
            Err(e) => {
                log::warn!("rewrite attempt {attempts} failed: {e}");
            }
        }
    }

    // degraded fallback: the selected text itself, normalized and capped
    let text = truncate_sentence(&normalize_caption(source.text()), cfg.max_chars);
    (
        AlignmentSentence {
            text,
            source_index: source.source_index(),
            attempts,
            degraded: true,
        },
        prompt,
    )
}
