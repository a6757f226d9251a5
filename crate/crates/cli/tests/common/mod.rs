//! Shared helpers for CLI integration tests: synthetic datasets, warm
//! evidence caches, mock scripts, and binary invocation.

use chrono::TimeZone;
use ooc_engine::backend::MockScript;
use ooc_engine::data::Label;
use ooc_engine::retrieval::{EvidenceCache, EvidenceItem, EvidenceSet};
use std::path::{Path, PathBuf};
use std::process::Output;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ooc")
}

pub fn run_ooc<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    std::process::Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn caption_for(pair_id: &str) -> String {
    format!("news caption {pair_id}")
}

/// Writes a labeled dataset JSONL; ids are `pair-0000`, `pair-0001`, ...
/// alternating pristine/falsified.
pub fn write_alternating_dataset(path: &Path, n: usize) -> Vec<(String, Label)> {
    let mut lines = String::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let pair_id = format!("pair-{i:04}");
        let truth = if i % 2 == 0 {
            Label::Pristine
        } else {
            Label::Falsified
        };
        lines.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "pair_id": pair_id,
                "image_ref": format!("images/{pair_id}.jpg"),
                "caption_text": caption_for(&pair_id),
                "truth": truth.as_str(),
                "split": "test",
            })
        ));
        labels.push((pair_id, truth));
    }
    std::fs::write(path, lines).unwrap();
    labels
}

/// Seeds the evidence cache with three captions per pair so retrieval never
/// leaves the process.
pub fn warm_cache(cache_dir: &Path, pair_ids: &[String]) {
    let cache = EvidenceCache::new(cache_dir.to_path_buf()).unwrap();
    let at = chrono::Utc.timestamp_opt(1_500_000_000, 0).unwrap();
    for pair_id in pair_ids {
        let set = EvidenceSet::new(
            pair_id.clone(),
            (0..3)
                .map(|rank| EvidenceItem {
                    source_url: format!("https://news.example/{pair_id}/{rank}"),
                    caption: format!("evidence {rank} for {pair_id}"),
                    retrieval_rank: rank,
                    fetched_at: at,
                })
                .collect(),
            None,
        );
        cache.put(&set).unwrap();
    }
}

pub fn write_mock_script(path: &Path, script: &MockScript) {
    std::fs::write(path, serde_json::to_string_pretty(script).unwrap()).unwrap();
}

/// Minimal TOML config pointing at per-test cache and output dirs.
pub fn write_config(path: &Path, cache_dir: &Path, out_dir: &Path, seed: u64) {
    let body = format!(
        "seed = {seed}\nworkers = 2\ncache_dir = {:?}\noutput_dir = {:?}\n",
        cache_dir.display().to_string(),
        out_dir.display().to_string(),
    );
    std::fs::write(path, body).unwrap();
}

/// The single run directory created under `out_dir`.
pub fn only_run_dir(out_dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(
        entries.len(),
        1,
        "expected exactly one run dir in {}",
        out_dir.display()
    );
    entries.pop().unwrap()
}
