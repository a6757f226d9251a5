//! Scoring and experiment runners: per-class accuracy, the stage-flag
//! ablation matrix, the strategy-by-top-k sweep, and embedding-distance
//! reports. Accuracies are carried as exact rationals internally and
//! rendered to one decimal place (percent) in CSV tables.

use crate::backend::EmbedBackend;
use crate::data::{Dataset, ImageTextPair, Label};
use crate::detector::{Judgment, ParseStatus};
use crate::error::EvalError;
use crate::pipeline::{PairOutcome, Pipeline, StageFlags};
use crate::rerank::{RerankConfig, Strategy};
use crate::retrieval::EvidenceSet;
use num_rational::Ratio;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Counts from one scored run. Accuracies derive from the counts exactly;
/// an empty class scores 1 by convention so the weighted identity
/// `acc_all * n = acc_f * n_f + acc_p * n_p` holds unconditionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_total: u64,
    pub n_falsified: u64,
    pub n_pristine: u64,
    pub n_correct_falsified: u64,
    pub n_correct_pristine: u64,
    pub n_parse_failed: u64,
}

impl MetricsReport {
    pub fn n_correct_all(&self) -> u64 {
        self.n_correct_falsified + self.n_correct_pristine
    }

    fn class_acc(correct: u64, total: u64) -> Ratio<u64> {
        if total == 0 {
            Ratio::one()
        } else {
            Ratio::new(correct, total)
        }
    }

    pub fn acc_all(&self) -> Ratio<u64> {
        Self::class_acc(self.n_correct_all(), self.n_total)
    }

    pub fn acc_falsified(&self) -> Ratio<u64> {
        Self::class_acc(self.n_correct_falsified, self.n_falsified)
    }

    pub fn acc_pristine(&self) -> Ratio<u64> {
        Self::class_acc(self.n_correct_pristine, self.n_pristine)
    }

    pub fn acc_all_f64(&self) -> f64 {
        self.acc_all().to_f64().unwrap_or(0.0)
    }

    pub fn acc_falsified_f64(&self) -> f64 {
        self.acc_falsified().to_f64().unwrap_or(0.0)
    }

    pub fn acc_pristine_f64(&self) -> f64 {
        self.acc_pristine().to_f64().unwrap_or(0.0)
    }

    /// The weighted-accuracy identity, checked in exact arithmetic.
    pub fn identity_holds(&self) -> bool {
        let lhs = self.acc_all() * Ratio::from_integer(self.n_total);
        let rhs = self.acc_falsified() * Ratio::from_integer(self.n_falsified)
            + self.acc_pristine() * Ratio::from_integer(self.n_pristine);
        lhs == rhs
    }
}

/// Percent with one decimal place, the table presentation.
pub fn percent_1dp(acc: Ratio<u64>) -> String {
    format!("{:.1}", acc.to_f64().unwrap_or(0.0) * 100.0)
}

/// Scores (truth, judgment) pairs. Failed parses count as incorrect and are
/// tallied separately; scoring is permutation-invariant.
pub fn score(judgments: &[(Label, Judgment)]) -> Result<MetricsReport, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut report = MetricsReport {
        n_total: judgments.len() as u64,
        n_falsified: 0,
        n_pristine: 0,
        n_correct_falsified: 0,
        n_correct_pristine: 0,
        n_parse_failed: 0,
    };
    for (truth, judgment) in judgments {
        match truth {
            Label::Falsified => report.n_falsified += 1,
            Label::Pristine => report.n_pristine += 1,
        }
        if judgment.parse_status == ParseStatus::Failed {
            report.n_parse_failed += 1;
            continue;
        }
        if judgment.verdict == Some(*truth) {
            match truth {
                Label::Falsified => report.n_correct_falsified += 1,
                Label::Pristine => report.n_correct_pristine += 1,
            }
        }
    }
    Ok(report)
}

/// Scores pipeline outcomes against the pairs' ground truth; unlabeled
/// pairs are excluded from scoring.
pub fn score_outcomes(outcomes: &[PairOutcome]) -> Result<MetricsReport, EvalError> {
    let scored: Vec<(Label, Judgment)> = outcomes
        .iter()
        .filter_map(|o| o.truth.map(|t| (t, o.judgment.clone())))
        .collect();
    score(&scored)
}

// --- ablation matrix ---------------------------------------------------------

/// Stage flags of one ablation row. `tuning` is carried as annotation only:
/// this engine cannot swap fine-tuned weights, it can only point at
/// differently configured backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub er: bool,
    pub aesp: bool,
    pub aegp: bool,
    pub re: bool,
    pub tuning: bool,
}

impl AblationFlags {
    pub fn stage_flags(&self) -> StageFlags {
        StageFlags {
            er: self.er,
            aesp: self.aesp,
            aegp: self.aegp,
            re: self.re,
        }
    }
}

/// The standard seven-row configuration matrix, from the zero-shot base
/// model up to the full pipeline.
pub fn default_ablation_rows() -> Vec<AblationFlags> {
    let row = |er, aesp, aegp, re, tuning| AblationFlags {
        er,
        aesp,
        aegp,
        re,
        tuning,
    };
    vec![
        row(false, false, false, false, false),
        row(true, false, false, false, false),
        row(false, false, false, false, true),
        row(true, false, false, false, true),
        row(true, true, false, false, true),
        row(true, true, true, false, true),
        row(true, true, true, true, true),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub outcomes: Vec<PairOutcome>,
}

/// Runs detection once per flag row; row failures are recorded and the run
/// continues. Row order is preserved.
pub fn run_ablation(
    dataset: &Dataset,
    rows: &[AblationFlags],
    base: &Pipeline,
) -> Vec<AblationRow> {
    rows.iter()
        .map(|flags| {
            let pipeline = match base.with_flags(flags.stage_flags()) {
                Ok(p) => p,
                Err(e) => {
                    return AblationRow {
                        flags: *flags,
                        metrics: None,
                        error: Some(e.to_string()),
                        outcomes: Vec::new(),
                    }
                }
            };
            let outcomes = pipeline.run_dataset(dataset);
            match score_outcomes(&outcomes) {
                Ok(metrics) => AblationRow {
                    flags: *flags,
                    metrics: Some(metrics),
                    error: None,
                    outcomes,
                },
                Err(e) => AblationRow {
                    flags: *flags,
                    metrics: None,
                    error: Some(e.to_string()),
                    outcomes,
                },
            }
        })
        .collect()
}

fn flag_str(v: bool) -> &'static str {
    if v {
        "true"
    } else {
        "false"
    }
}

/// Metrics table CSV: flag columns, then accuracies (percent, 1 dp) and the
/// parse-failure count.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "er",
        "aesp",
        "aegp",
        "re",
        "tuning",
        "acc_all",
        "acc_falsified",
        "acc_pristine",
        "n_parse_failed",
    ])?;
    for row in rows {
        let f = row.flags;
        match &row.metrics {
            Some(m) => writer.write_record([
                flag_str(f.er),
                flag_str(f.aesp),
                flag_str(f.aegp),
                flag_str(f.re),
                flag_str(f.tuning),
                &percent_1dp(m.acc_all()),
                &percent_1dp(m.acc_falsified()),
                &percent_1dp(m.acc_pristine()),
                &m.n_parse_failed.to_string(),
            ])?,
            None => writer.write_record([
                flag_str(f.er),
                flag_str(f.aesp),
                flag_str(f.aegp),
                flag_str(f.re),
                flag_str(f.tuning),
                "",
                "",
                "",
                "",
            ])?,
        }
    }
    writer.flush().map_err(EvalError::Io)?;
    Ok(())
}

// --- top-k sweep --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub k: usize,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// One cell per (strategy, k), in the given order. `ks` outside 1..=3 are
/// rejected up front.
pub fn sweep_topk(
    dataset: &Dataset,
    strategies: &[Strategy],
    ks: &[usize],
    base: &Pipeline,
) -> Result<SweepReport, EvalError> {
    if let Some(bad) = ks.iter().find(|k| !(1..=3).contains(*k)) {
        return Err(EvalError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("top-k {bad} outside 1..=3"),
        )));
    }
    let mut cells = Vec::with_capacity(strategies.len() * ks.len());
    for &strategy in strategies {
        for &k in ks {
            let rerank = RerankConfig {
                strategy,
                top_k: k,
                ..base.cfg.rerank.clone()
            };
            let cell = match base.with_rerank(rerank) {
                Ok(pipeline) => {
                    let outcomes = pipeline.run_dataset(dataset);
                    match score_outcomes(&outcomes) {
                        Ok(metrics) => SweepCell {
                            strategy,
                            k,
                            metrics: Some(metrics),
                            error: None,
                        },
                        Err(e) => SweepCell {
                            strategy,
                            k,
                            metrics: None,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Err(e) => SweepCell {
                    strategy,
                    k,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    Ok(SweepReport { cells })
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "strategy",
        "k",
        "acc_all",
        "acc_falsified",
        "acc_pristine",
        "n_parse_failed",
    ])?;
    for cell in &report.cells {
        match &cell.metrics {
            Some(m) => writer.write_record([
                cell.strategy.as_str(),
                &cell.k.to_string(),
                &percent_1dp(m.acc_all()),
                &percent_1dp(m.acc_falsified()),
                &percent_1dp(m.acc_pristine()),
                &m.n_parse_failed.to_string(),
            ])?,
            None => writer.write_record([
                cell.strategy.as_str(),
                &cell.k.to_string(),
                "",
                "",
                "",
                "",
            ])?,
        }
    }
    writer.flush().map_err(EvalError::Io)?;
    Ok(())
}

// --- distance report ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub pair_id: String,
    pub evidence_rank: usize,
    pub euclidean_distance: f64,
    pub cosine_similarity: f64,
}

/// Embeds each pair's caption together with its evidence captions and
/// reports the distance from the pair to every evidence item. Pairs without
/// retrieved items contribute no rows.
pub fn distance_report(
    pairs: &[ImageTextPair],
    evidence: &HashMap<String, EvidenceSet>,
    embed: &dyn EmbedBackend,
) -> Result<Vec<DistanceRow>, EvalError> {
    let mut rows = Vec::new();
    for pair in pairs {
        let Some(set) = evidence.get(&pair.pair_id) else {
            continue;
        };
        if set.items.is_empty() {
            continue;
        }
        let mut texts = vec![pair.caption_text.clone()];
        texts.extend(set.captions().map(str::to_owned));
        let vectors = embed.embed(&texts)?;
        let (query_vec, caption_vecs) = vectors.split_first().expect("query vector present");
        for (item, vec) in set.items.iter().zip(caption_vecs.iter()) {
            rows.push(DistanceRow {
                pair_id: pair.pair_id.clone(),
                evidence_rank: item.retrieval_rank,
                euclidean_distance: query_vec.euclidean(vec),
                cosine_similarity: query_vec.cosine(vec),
            });
        }
    }
    Ok(rows)
}

pub fn write_distance_csv(path: &Path, rows: &[DistanceRow]) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "pair_id",
        "evidence_rank",
        "euclidean_distance",
        "cosine_similarity",
    ])?;
    for row in rows {
        writer.write_record([
            row.pair_id.as_str(),
            &row.evidence_rank.to_string(),
            &format!("{}", row.euclidean_distance),
            &format!("{}", row.cosine_similarity),
        ])?;
    }
    writer.flush().map_err(EvalError::Io)?;
    Ok(())
}

/// Convenience constructor for scoring tests and brute-force comparisons.
pub fn judgment_for(label: Label) -> Judgment {
    Judgment {
        verdict: Some(label),
        rationale: None,
        raw_output: String::new(),
        parse_status: ParseStatus::Clean,
    }
}
