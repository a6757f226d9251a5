//! Instruction-dataset construction with label verification.
//!
//! Pristine pairs get the fixed affirmative target with no model call.
//! Falsified pairs get a model-written negative answer whose parsed label
//! must match the ground truth; mismatches regenerate up to a cap, after
//! which the pair is quarantined rather than looping forever. Verified
//! negative targets are canonicalized to the fixed template plus the
//! model's rationale, so every emitted sample parses back to its label.

use crate::backend::{ChatBackend, ChatMessage, ChatRequest};
use crate::data::{Dataset, ImageTextPair, Label};
use crate::detector::{parse_judgment, AFFIRMATIVE_TEMPLATE, NEGATIVE_TEMPLATE};
use crate::error::BuildError;
use crate::pipeline::Pipeline;
use crate::rewrite::AlignmentSentence;
use crate::templates::TemplateSet;
use crate::util::run_pool;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// One record of the instruction dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionSample {
    pub pair_id: String,
    pub image_ref: String,
    pub caption_text: String,
    pub alignment_sentence: String,
    pub query: String,
    pub target_output: String,
    pub label: Label,
    pub retries_used: u32,
    pub verified: bool,
}

/// On-disk JSONL shape; `verified` is not emitted because quarantined
/// samples never reach the file.
#[derive(Debug, Serialize, Deserialize)]
struct InstructionRecord {
    pair_id: String,
    image_ref: String,
    caption_text: String,
    alignment_sentence: String,
    query: String,
    target_output: String,
    label: Label,
    retries_used: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Regenerations allowed after the first mismatching reply.
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_retries: 5,
            temperature: 0.7,
        }
    }
}

/// Builds one instruction sample and verifies its label.
pub fn build_sample(
    pair: &ImageTextPair,
    sentence: &AlignmentSentence,
    query_text: &str,
    cfg: &VerifyConfig,
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<InstructionSample, BuildError> {
    let truth = pair.truth.ok_or_else(|| BuildError::UnlabeledPair {
        pair_id: pair.pair_id.clone(),
    })?;

    let mut sample = InstructionSample {
        pair_id: pair.pair_id.clone(),
        image_ref: pair.image_ref.clone(),
        caption_text: pair.caption_text.clone(),
        alignment_sentence: sentence.text.clone(),
        query: query_text.to_string(),
        target_output: String::new(),
        label: truth,
        retries_used: 0,
        verified: false,
    };

    if truth == Label::Pristine {
        // fixed affirmative target, no rationale, no model call
        sample.target_output = AFFIRMATIVE_TEMPLATE.to_string();
        sample.verified = true;
        return Ok(sample);
    }

    let prompt = templates.render(
        "rationale",
        &[
            ("sentence", sentence.text.as_str()),
            ("caption", pair.caption_text.as_str()),
        ],
    );
    let req = ChatRequest::new(
        vec![ChatMessage::user(prompt).with_image(&pair.image_ref)],
        cfg.temperature,
        "verify",
    );

    let mut last_reply = String::new();
    for attempt in 0..=cfg.max_retries {
        let resp = chat.chat(&req)?;
        last_reply = resp.text.clone();
        let judgment = parse_judgment(&resp.text);
        if judgment.verdict == Some(truth) {
            if let Some(rationale) = judgment.rationale.filter(|r| !r.is_empty()) {
                sample.target_output = format!("{NEGATIVE_TEMPLATE} {rationale}");
                sample.retries_used = attempt;
                sample.verified = true;
                return Ok(sample);
            }
            log::debug!(
                "verify attempt {} for {}: matching verdict but no rationale",
                attempt + 1,
                pair.pair_id
            );
        } else {
            log::debug!(
                "verify attempt {} for {}: predicted {:?}, truth {:?}",
                attempt + 1,
                pair.pair_id,
                judgment.verdict,
                truth
            );
        }
    }

    // quarantined: keep the last reply for the build report
    sample.target_output = last_reply;
    sample.retries_used = cfg.max_retries;
    sample.verified = false;
    Ok(sample)
}

/// Aggregate accounting for one dataset build.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BuildReport {
    pub n_input_pristine: usize,
    pub n_input_falsified: usize,
    pub n_output_pristine: usize,
    pub n_output_falsified: usize,
    pub quarantined: Vec<String>,
    /// retries_used -> number of verified samples that needed that many.
    pub retry_histogram: BTreeMap<u32, usize>,
    pub errors: Vec<(String, String)>,
}

impl BuildReport {
    /// Class balance is preserved up to quarantine losses.
    pub fn quarantine_identity_holds(&self) -> bool {
        let lost_p = self.n_input_pristine - self.n_output_pristine;
        let lost_f = self.n_input_falsified - self.n_output_falsified;
        lost_p + lost_f == self.quarantined.len() + self.errors.len()
    }
}

/// Runs evidence stages and sample construction over every labeled pair.
/// Output is sorted by pair_id; per-pair failures are collected, never
/// fatal. Quarantined samples appear only in the report.
pub fn build_dataset(
    dataset: &Dataset,
    pipeline: &Pipeline,
    cfg: &VerifyConfig,
) -> (Vec<InstructionSample>, BuildReport) {
    let mut report = BuildReport::default();
    for pair in &dataset.pairs {
        match pair.truth {
            Some(Label::Pristine) => report.n_input_pristine += 1,
            Some(Label::Falsified) => report.n_input_falsified += 1,
            None => {}
        }
    }

    enum Built {
        Sample(InstructionSample),
        Error(String, String),
    }

    let results = run_pool(&dataset.pairs, pipeline.cfg.workers, |_, pair| {
        if pair.truth.is_none() {
            return Built::Error(pair.pair_id.clone(), "missing ground-truth label".into());
        }
        let (query, sentence) = match pipeline.prepare_alignment(pair) {
            Ok(prepared) => prepared,
            Err(e) => return Built::Error(pair.pair_id.clone(), e.to_string()),
        };
        match build_sample(
            pair,
            &sentence,
            &query.instruction_text,
            cfg,
            pipeline.chat_backend(),
            pipeline.templates(),
        ) {
            Ok(sample) => Built::Sample(sample),
            Err(e) => Built::Error(pair.pair_id.clone(), e.to_string()),
        }
    });

    let mut samples = Vec::new();
    for result in results {
        match result {
            Built::Sample(sample) if sample.verified => {
                // label-target consistency holds by construction; check it
                // on every build anyway
                debug_assert_eq!(
                    parse_judgment(&sample.target_output).verdict,
                    Some(sample.label),
                    "verified sample {} disagrees with its target",
                    sample.pair_id
                );
                match sample.label {
                    Label::Pristine => report.n_output_pristine += 1,
                    Label::Falsified => report.n_output_falsified += 1,
                }
                *report
                    .retry_histogram
                    .entry(sample.retries_used)
                    .or_insert(0) += 1;
                samples.push(sample);
            }
            Built::Sample(sample) => report.quarantined.push(sample.pair_id),
            Built::Error(pair_id, message) => report.errors.push((pair_id, message)),
        }
    }
    samples.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    report.quarantined.sort();
    (samples, report)
}

/// Writes verified samples as JSONL sorted by pair_id.
pub fn write_instruction_jsonl(
    path: &Path,
    samples: &[InstructionSample],
) -> Result<(), BuildError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        assert!(sample.verified, "only verified samples may be emitted");
        let record = InstructionRecord {
            pair_id: sample.pair_id.clone(),
            image_ref: sample.image_ref.clone(),
            caption_text: sample.caption_text.clone(),
            alignment_sentence: sample.alignment_sentence.clone(),
            query: sample.query.clone(),
            target_output: sample.target_output.clone(),
            label: sample.label,
            retries_used: sample.retries_used,
        };
        let line = serde_json::to_string(&record).expect("instruction record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_instruction_jsonl(path: &Path) -> Result<Vec<InstructionSample>, BuildError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstructionRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        samples.push(InstructionSample {
            pair_id: record.pair_id,
            image_ref: record.image_ref,
            caption_text: record.caption_text,
            alignment_sentence: record.alignment_sentence,
            query: record.query,
            target_output: record.target_output,
            label: record.label,
            retries_used: record.retries_used,
            verified: true,
        });
    }
    Ok(samples)
}

// --- training configuration -------------------------------------------------

/// Adapter-tuning settings emitted for the (external) training stage; this
/// engine never executes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lora_rank: u32,
    /// Base hidden size, informational only.
    pub lora_dim: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub dataset_path: String,
}

impl TrainingConfig {
    pub fn defaults(dataset_path: impl Into<String>) -> Self {
        Self {
            lora_rank: 16,
            lora_dim: 4096,
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 5,
            dataset_path: dataset_path.into(),
        }
    }

    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if self.lora_rank == 0
            || self.lora_dim == 0
            || self.batch_size == 0
            || self.epochs == 0
            || !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
        {
            return Err(crate::error::ConfigError::new(
                "training",
                "all training parameters must be positive",
            ));
        }
        Ok(())
    }
}

pub fn emit_training_config(path: &Path, cfg: &TrainingConfig) -> Result<(), BuildError> {
    cfg.validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let body = serde_json::to_string_pretty(cfg).expect("training config serializes");
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_training_config(path: &Path) -> Result<TrainingConfig, BuildError> {
    let raw = std::fs::read_to_string(path)?;
    let cfg: TrainingConfig = serde_json::from_str(&raw)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{install_mock, MockRuleSpec, MockScript};
    use tempfile::tempdir;

    fn labeled_pair(id: &str, truth: Label) -> ImageTextPair {
        ImageTextPair::new(id, format!("{id}.jpg"), format!("caption for {id}")).with_truth(truth)
    }

    fn sentence() -> AlignmentSentence {
        AlignmentSentence {
            text: "The match took place at Anfield in 2012.".into(),
            source_index: 0,
            attempts: 1,
            degraded: false,
        }
    }

    #[test]
    fn pristine_pair_needs_no_model_call() {
        let mock = install_mock(MockScript::default()).unwrap();
        let pair = labeled_pair("p1", Label::Pristine);
        let sample = build_sample(
            &pair,
            &sentence(),
            "query text",
            &VerifyConfig::default(),
            &mock,
            &TemplateSet::builtin(),
        )
        .unwrap();
        assert_eq!(sample.target_output, AFFIRMATIVE_TEMPLATE);
        assert_eq!(sample.retries_used, 0);
        assert!(sample.verified);
        assert_eq!(mock.chat_calls(), 0);
    }

    #[test]
    fn falsified_pair_retries_until_label_matches() {
        let mock = install_mock(MockScript {
            chat: vec![MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![
                    "Yes. The image is rightly used in the textual context.".into(),
                    format!("{NEGATIVE_TEMPLATE} The venue differs."),
                ],
            )],
            ..Default::default()
        })
        .unwrap();
        let pair = labeled_pair("f1", Label::Falsified);
        let sample = build_sample(
            &pair,
            &sentence(),
            "query text",
            &VerifyConfig::default(),
            &mock,
            &TemplateSet::builtin(),
        )
        .unwrap();
        assert!(sample.verified);
        assert_eq!(sample.retries_used, 1);
        assert_eq!(
            sample.target_output,
            format!("{NEGATIVE_TEMPLATE} The venue differs.")
        );
        assert_eq!(mock.chat_calls(), 2);
    }

    #[test]
    fn persistent_mismatch_quarantines_at_cap() {
        let mock = install_mock(MockScript {
            chat: vec![MockRuleSpec::substring(
                "Authenticity judgment task",
                vec!["Yes. The image is rightly used in the textual context.".into()],
            )],
            ..Default::default()
        })
        .unwrap();
        let pair = labeled_pair("f2", Label::Falsified);
        let cfg = VerifyConfig {
            max_retries: 5,
            ..Default::default()
        };
        let sample = build_sample(
            &pair,
            &sentence(),
            "query",
            &cfg,
            &mock,
            &TemplateSet::builtin(),
        )
        .unwrap();
        assert!(!sample.verified);
        assert_eq!(sample.retries_used, 5);
        // quarantine happens at exactly max_retries + 1 failed attempts
        assert_eq!(mock.chat_calls(), 6);
    }

    #[test]
    fn negative_reply_without_rationale_is_retried() {
        let mock = install_mock(MockScript {
            chat: vec![MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![
                    NEGATIVE_TEMPLATE.to_string(),
                    format!("{NEGATIVE_TEMPLATE} The date is wrong."),
                ],
            )],
            ..Default::default()
        })
        .unwrap();
        let pair = labeled_pair("f3", Label::Falsified);
        let sample = build_sample(
            &pair,
            &sentence(),
            "query",
            &VerifyConfig::default(),
            &mock,
            &TemplateSet::builtin(),
        )
        .unwrap();
        assert!(sample.verified);
        assert_eq!(sample.retries_used, 1);
        assert!(sample.target_output.ends_with("The date is wrong."));
    }

    #[test]
    fn unlabeled_pair_is_rejected() {
        let mock = install_mock(MockScript::default()).unwrap();
        let pair = ImageTextPair::new("u1", "u1.jpg", "caption");
        let err = build_sample(
            &pair,
            &sentence(),
            "query",
            &VerifyConfig::default(),
            &mock,
            &TemplateSet::builtin(),
        )
        .unwrap_err();
        assert!(matches!(err, BuildError::UnlabeledPair { .. }));
    }

    #[test]
    fn verified_targets_parse_back_to_their_label() {
        // label-target consistency, checked on every verified sample
        let mock = install_mock(MockScript {
            chat: vec![MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![format!("{NEGATIVE_TEMPLATE} Mismatched event.")],
            )],
            ..Default::default()
        })
        .unwrap();
        for truth in [Label::Pristine, Label::Falsified] {
            let pair = labeled_pair("x", truth);
            let sample = build_sample(
                &pair,
                &sentence(),
                "query",
                &VerifyConfig::default(),
                &mock,
                &TemplateSet::builtin(),
            )
            .unwrap();
            assert!(sample.verified);
            let parsed = parse_judgment(&sample.target_output);
            assert_eq!(parsed.verdict, Some(truth));
        }
    }

    #[test]
    fn training_config_round_trips_with_paper_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("training.json");
        let cfg = TrainingConfig::defaults("instruction.jsonl");
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!(cfg.epochs, 5);
        emit_training_config(&path, &cfg).unwrap();
        let loaded = load_training_config(&path).unwrap();
        assert_eq!(loaded, cfg);

        let overridden = TrainingConfig {
            epochs: 1,
            ..TrainingConfig::defaults("d.jsonl")
        };
        emit_training_config(&path, &overridden).unwrap();
        assert_eq!(load_training_config(&path).unwrap().epochs, 1);
    }

    #[test]
    fn instruction_jsonl_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inst.jsonl");
        let samples = vec![InstructionSample {
            pair_id: "a".into(),
            image_ref: "a.jpg".into(),
            caption_text: "caption".into(),
            alignment_sentence: "sentence".into(),
            query: "query".into(),
            target_output: AFFIRMATIVE_TEMPLATE.into(),
            label: Label::Pristine,
            retries_used: 0,
            verified: true,
        }];
        write_instruction_jsonl(&path, &samples).unwrap();
        let loaded = load_instruction_jsonl(&path).unwrap();
        assert_eq!(loaded, samples);
    }
}
