//! Domain types and dataset containers shared by every stage.
//!
//! A dataset is a JSONL file, one record per line:
//!
//! ```text
//! {"pair_id": str, "image_ref": str, "caption_text": str,
//!  "truth": "pristine"|"falsified"|null, "split": str|null}
//! ```
//!
//! Unknown extra fields are preserved on round-trip.

use crate::error::DataError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Ground-truth class of an image-text pair: the image is either used in its
/// real context (pristine) or repurposed into a misleading one (falsified).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pristine,
    Falsified,
}

impl Label {
    /// Numeric encoding: pristine maps to 0, falsified to 1.
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Pristine => 0,
            Label::Falsified => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Pristine => "pristine",
            Label::Falsified => "falsified",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "pristine" => Some(Label::Pristine),
            "falsified" => Some(Label::Falsified),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unsplit,
}

impl Split {
    fn from_record(s: Option<&str>) -> Result<Split, String> {
        match s {
            None => Ok(Split::Unsplit),
            Some("train") => Ok(Split::Train),
            Some("val") => Ok(Split::Val),
            Some("test") => Ok(Split::Test),
            Some("unsplit") => Ok(Split::Unsplit),
            Some(other) => Err(format!("unknown split {other:?}")),
        }
    }

    fn to_record(self) -> Option<&'static str> {
        match self {
            Split::Train => Some("train"),
            Split::Val => Some("val"),
            Split::Test => Some("test"),
            Split::Unsplit => None,
        }
    }
}

/// One news image plus its textual context.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    /// Caller-supplied unique id; never derived from content so re-crawled
    /// evidence can be re-attached.
    pub pair_id: String,
    /// File path or absolute URL of the image.
    pub image_ref: String,
    /// The textual context attached to the image.
    pub caption_text: String,
    pub split: Split,
    pub truth: Option<Label>,
    /// Unknown JSON fields carried through load/save untouched.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ImageTextPair {
    pub fn new(
        pair_id: impl Into<String>,
        image_ref: impl Into<String>,
        caption_text: impl Into<String>,
    ) -> Self {
        Self {
            pair_id: pair_id.into(),
            image_ref: image_ref.into(),
            caption_text: caption_text.into(),
            split: Split::Unsplit,
            truth: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_truth(mut self, truth: Label) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn validate(&self) -> Result<(), String> {
        if self.pair_id.is_empty() {
            return Err("pair_id is empty".into());
        }
        if self.caption_text.is_empty() {
            return Err("caption_text is empty".into());
        }
        if self.image_ref.is_empty() {
            return Err("image_ref is empty".into());
        }
        Ok(())
    }
}

/// A pair wrapped with the rendered query text handed to model prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionQuery {
    pub pair: ImageTextPair,
    pub instruction_text: String,
}

impl DetectionQuery {
    /// The instruction text must carry the pair's caption verbatim.
    pub fn new(pair: ImageTextPair, instruction_text: String) -> Result<Self, String> {
        if !instruction_text.contains(&pair.caption_text) {
            return Err("instruction_text must contain the caption verbatim".into());
        }
        Ok(Self {
            pair,
            instruction_text,
        })
    }
}

/// On-disk JSONL shape; field order fixed for stable serialization.
#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    pair_id: String,
    image_ref: String,
    caption_text: String,
    truth: Option<Label>,
    split: Option<String>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl PairRecord {
    fn into_pair(self) -> Result<ImageTextPair, String> {
        let split = Split::from_record(self.split.as_deref())?;
        let pair = ImageTextPair {
            pair_id: self.pair_id,
            image_ref: self.image_ref,
            caption_text: self.caption_text,
            split,
            truth: self.truth,
            extra: self.extra,
        };
        pair.validate()?;
        Ok(pair)
    }

    fn from_pair(pair: &ImageTextPair) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            image_ref: pair.image_ref.clone(),
            caption_text: pair.caption_text.clone(),
            truth: pair.truth,
            split: pair.split.to_record().map(str::to_owned),
            extra: pair.extra.clone(),
        }
    }
}

/// An ordered collection of image-text pairs with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<ImageTextPair>,
}

impl Dataset {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pairs: Vec::new(),
        }
    }

    /// Builds a dataset, rejecting duplicate pair ids.
    pub fn from_pairs(
        name: impl Into<String>,
        pairs: Vec<ImageTextPair>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for pair in &pairs {
            if !seen.insert(pair.pair_id.clone()) {
                return Err(DataError::DuplicateId {
                    pair_id: pair.pair_id.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, pair_id: &str) -> Option<&ImageTextPair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }
}

/// A problem line encountered while loading; the rest of the file still loads.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadIssue {
    Schema { line: usize, reason: String },
    DuplicateId { line: usize, pair_id: String },
}

#[derive(Debug)]
pub struct DatasetLoad {
    pub dataset: Dataset,
    pub issues: Vec<LoadIssue>,
}

/// Loads a JSONL dataset, preserving line order. Malformed lines and
/// duplicate ids are skipped and reported with their line numbers; only I/O
/// failures abort the load.
pub fn load_dataset(path: &Path) -> Result<DatasetLoad, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let mut pairs = Vec::new();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(LoadIssue::Schema {
                    line: line_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let pair = match record.into_pair() {
            Ok(p) => p,
            Err(reason) => {
                issues.push(LoadIssue::Schema {
                    line: line_no,
                    reason,
                });
                continue;
            }
        };
        if !seen.insert(pair.pair_id.clone()) {
            issues.push(LoadIssue::DuplicateId {
                line: line_no,
                pair_id: pair.pair_id,
            });
            continue;
        }
        pairs.push(pair);
    }

    Ok(DatasetLoad {
        dataset: Dataset { name, pairs },
        issues,
    })
}

/// Writes a dataset as JSONL with LF line endings. Inverse of [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in &dataset.pairs {
        let record = PairRecord::from_pair(pair);
        let line = serde_json::to_string(&record).expect("pair record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Per-label and per-split counts plus the class balance ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub n_total: usize,
    pub n_pristine: usize,
    pub n_falsified: usize,
    pub n_unlabeled: usize,
    pub per_split: BTreeMap<String, usize>,
    /// min(pristine, falsified) / max(pristine, falsified); 1 when both zero.
    pub balance_ratio: f64,
}

pub fn dataset_stats(dataset: &Dataset) -> StatsReport {
    let mut n_pristine = 0;
    let mut n_falsified = 0;
    let mut n_unlabeled = 0;
    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();

    for pair in &dataset.pairs {
        match pair.truth {
            Some(Label::Pristine) => n_pristine += 1,
            Some(Label::Falsified) => n_falsified += 1,
            None => n_unlabeled += 1,
        }
        let split = pair.split.to_record().unwrap_or("unsplit");
        *per_split.entry(split.to_string()).or_insert(0) += 1;
    }

    let (lo, hi) = (
        n_pristine.min(n_falsified) as f64,
        n_pristine.max(n_falsified) as f64,
    );
    let balance_ratio = if hi == 0.0 { 1.0 } else { lo / hi };

    StatsReport {
        n_total: dataset.pairs.len(),
        n_pristine,
        n_falsified,
        n_unlabeled,
        per_split,
        balance_ratio,
    }
}

/// Stratified subsample: each label group keeps `floor(proportion * count)`
/// members (unlabeled pairs form their own group). Pairs are sorted by
/// pair_id before the seeded shuffle, so the result depends only on the
/// member set, the proportion, and the seed — never on input order. The
/// returned dataset is sorted by pair_id.
pub fn subsample(dataset: &Dataset, proportion: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(DataError::InvalidProportion(proportion));
    }

    let mut groups: BTreeMap<&str, Vec<&ImageTextPair>> = BTreeMap::new();
    for pair in &dataset.pairs {
        let key = match pair.truth {
            Some(Label::Pristine) => "pristine",
            Some(Label::Falsified) => "falsified",
            None => "unlabeled",
        };
        groups.entry(key).or_default().push(pair);
    }

    let mut picked: Vec<ImageTextPair> = Vec::new();
    for (key, mut members) in groups {
        members.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        let take = (proportion * members.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(seed, key));
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(take).cloned());
    }
    picked.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));

    Ok(Dataset {
        name: format!("{}@{}", dataset.name, proportion),
        pairs: picked,
    })
}
