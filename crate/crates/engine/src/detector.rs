//! Final judgment: render the detection prompt and parse the verdict.
//!
//! Output convention: an affirmative verdict opens with the fixed
//! affirmative template, a negative verdict opens with the fixed negative
//! template followed by a free-form rationale. The parser recovers the
//! verdict cleanly from either template, falls back to scanning the first
//! sentence for a yes/no cue, and encodes unparseable output in
//! `parse_status` rather than failing.

use crate::backend::{ChatMessage, ChatRequest};
use crate::data::{ImageTextPair, Label};
use crate::templates::TemplateSet;
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Target output for a pristine pair.
pub const AFFIRMATIVE_TEMPLATE: &str = "Yes. The image is rightly used in the textual context.";
/// Leading sentence of the target output for a falsified pair.
pub const NEGATIVE_TEMPLATE: &str = "No. The image is wrongly used in the textual context.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Lenient,
    Failed,
}

/// The detector's verdict on one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    /// Present unless `parse_status` is `Failed`.
    pub verdict: Option<Label>,
    pub rationale: Option<String>,
    pub raw_output: String,
    pub parse_status: ParseStatus,
}

impl Judgment {
    pub fn failed(raw_output: impl Into<String>) -> Self {
        Self {
            verdict: None,
            rationale: None,
            raw_output: raw_output.into(),
            parse_status: ParseStatus::Failed,
        }
    }
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    // boundary guard: a multibyte char straddling prefix.len() cannot match
    // an ASCII prefix, and slicing there would panic
    if text.len() >= prefix.len()
        && text.is_char_boundary(prefix.len())
        && text[..prefix.len()].eq_ignore_ascii_case(prefix)
    {
        Some(&text[prefix.len()..])
    } else {
        None
    }
}

/// Parses a model reply into a [`Judgment`].
///
/// Clean: the reply starts (after whitespace, case-insensitive) with "Yes."
/// or "No."; the canonical template sentence is stripped if present and any
/// remaining text becomes the rationale. Lenient: the first sentence
/// contains a standalone yes/no cue. Anything else is a failed parse.
pub fn parse_judgment(text: &str) -> Judgment {
    let raw_output = text.to_string();
    let trimmed = text.trim_start();

    let clean = strip_prefix_ci(trimmed, "yes.")
        .map(|rest| (Label::Pristine, rest))
        .or_else(|| strip_prefix_ci(trimmed, "no.").map(|rest| (Label::Falsified, rest)));

    if let Some((verdict, rest)) = clean {
        let template_body = match verdict {
            Label::Pristine => &AFFIRMATIVE_TEMPLATE["Yes.".len()..],
            Label::Falsified => &NEGATIVE_TEMPLATE["No.".len()..],
        };
        let template_body = template_body.trim_start();
        let rest = rest.trim_start();
        let remainder = strip_prefix_ci(rest, template_body).unwrap_or(rest);
        let rationale = remainder.trim();
        return Judgment {
            verdict: Some(verdict),
            rationale: (!rationale.is_empty()).then(|| rationale.to_string()),
            raw_output,
            parse_status: ParseStatus::Clean,
        };
    }

    // lenient: scan the first sentence for a yes/no cue
    let first_sentence = match trimmed.find(['.', '!', '?']) {
        Some(idx) => &trimmed[..=idx],
        None => trimmed,
    };
    let cue = Regex::new(r"(?i)\b(yes|no)\b").unwrap();
    if let Some(m) = cue.find(first_sentence) {
        let verdict = if m.as_str().eq_ignore_ascii_case("yes") {
            Label::Pristine
        } else {
            Label::Falsified
        };
        return Judgment {
            verdict: Some(verdict),
            rationale: None,
            raw_output,
            parse_status: ParseStatus::Lenient,
        };
    }

    Judgment::failed(raw_output)
}

/// Renders the judgment prompt. The evidence block appears iff
/// `with_evidence` and a sentence is available; the rationale instruction
/// appears iff `with_explanation`. Rendering is deterministic.
pub fn build_detection_prompt(
    pair: &ImageTextPair,
    sentence: Option<&str>,
    with_evidence: bool,
    with_explanation: bool,
    templates: &TemplateSet,
) -> ChatRequest {
    let evidence_section = match (with_evidence, sentence) {
        (true, Some(s)) => templates.render("judge_evidence", &[("sentence", s)]),
        _ => String::new(),
    };
    let explanation_clause = if with_explanation {
        templates.render("judge_explain", &[])
    } else {
        String::new()
    };
    let text = templates.render(
        "judge",
        &[
            ("evidence_section", evidence_section.as_str()),
            ("caption", pair.caption_text.as_str()),
            ("explanation_clause", explanation_clause.as_str()),
        ],
    );
    ChatRequest::new(
        vec![ChatMessage::user(text).with_image(&pair.image_ref)],
        0.0,
        "judge",
    )
}
