//! On-disk evidence cache: one JSON file per pair in a content-addressed
//! directory, written via atomic rename so concurrent readers never observe
//! a partial entry. Corrupt entries are quarantined, not deleted.

use super::EvidenceSet;
use crate::error::RetrievalError;
use std::path::{Path, PathBuf};

pub struct EvidenceCache {
    dir: PathBuf,
}

impl EvidenceCache {
    pub fn new(dir: PathBuf) -> Result<Self, RetrievalError> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, pair_id: &str) -> PathBuf {
        let hash = crate::util::content_hash(pair_id.as_bytes());
        self.dir.join(format!("{}.json", &hash[..32]))
    }

    /// Returns the cached set, `None` on a miss, or `CorruptEntry` after
    /// quarantining an unreadable file (the caller re-fetches).
    pub fn get(&self, pair_id: &str) -> Result<Option<EvidenceSet>, RetrievalError> {
        let path = self.entry_path(pair_id);
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        match serde_json::from_str::<EvidenceSet>(&raw) {
            Ok(set) if set.pair_id == pair_id => Ok(Some(set)),
            Ok(set) => {
                log::error!(
                    "cache entry {} holds pair {:?}, expected {:?}",
                    path.display(),
                    set.pair_id,
                    pair_id
                );
                self.quarantine(&path);
                Err(RetrievalError::CorruptEntry {
                    pair_id: pair_id.to_string(),
                })
            }
            Err(_) => {
                self.quarantine(&path);
                Err(RetrievalError::CorruptEntry {
                    pair_id: pair_id.to_string(),
                })
            }
        }
    }

    pub fn put(&self, set: &EvidenceSet) -> Result<(), RetrievalError> {
        let path = self.entry_path(&set.pair_id);
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let body = serde_json::to_vec(set).expect("evidence set serializes");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn quarantine(&self, path: &Path) {
        let target = path.with_extension("corrupt");
        if let Err(e) = std::fs::rename(path, &target) {
            log::warn!("failed to quarantine {}: {e}", path.display());
            let _ = std::fs::remove_file(path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::EvidenceItem;
    use chrono::TimeZone;
    use tempfile::tempdir;

    fn sample_set(pair_id: &str) -> EvidenceSet {
        let at = chrono::Utc.timestamp_opt(1_700_000_000, 0).unwrap();
        EvidenceSet::new(
            pair_id,
            vec![
                EvidenceItem {
                    source_url: "https://a.example/1".into(),
                    caption: "First caption".into(),
                    retrieval_rank: 0,
                    fetched_at: at,
                },
                EvidenceItem {
                    source_url: "https://b.example/2".into(),
                    caption: "Second caption".into(),
                    retrieval_rank: 1,
                    fetched_at: at,
                },
            ],
            None,
        )
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempdir().unwrap();
        let cache = EvidenceCache::new(dir.path().to_path_buf()).unwrap();
        let set = sample_set("pair-1");
        cache.put(&set).unwrap();
        let got = cache.get("pair-1").unwrap().unwrap();
        assert_eq!(got, set);
    }

    #[test]
    fn get_unknown_id_is_absent_not_error() {
        let dir = tempdir().unwrap();
        let cache = EvidenceCache::new(dir.path().to_path_buf()).unwrap();
        assert!(cache.get("never-stored").unwrap().is_none());
    }

    #[test]
    fn truncated_entry_is_quarantined_then_misses() {
        let dir = tempdir().unwrap();
        let cache = EvidenceCache::new(dir.path().to_path_buf()).unwrap();
        let set = sample_set("pair-2");
        cache.put(&set).unwrap();

        let path = cache.entry_path("pair-2");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();

        match cache.get("pair-2") {
            Err(RetrievalError::CorruptEntry { pair_id }) => assert_eq!(pair_id, "pair-2"),
            other => panic!("expected CorruptEntry, got {other:?}"),
        }
        // quarantined alongside, and the slot now reads as a miss
        assert!(path.with_extension("corrupt").exists());
        assert!(cache.get("pair-2").unwrap().is_none());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::retrieval::EvidenceItem;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn arb_evidence_set() -> impl Strategy<Value = EvidenceSet> {
        (
            "[a-z0-9-]{1,16}",
            prop::collection::vec(
                (
                    "https?://[a-z]{3,8}\\.example/[a-z0-9/]{0,10}",
                    "[ -~]{1,80}",
                ),
                0..8,
            ),
            prop::option::of("[ -~]{1,120}"),
            0i64..2_000_000_000,
        )
            .prop_map(|(pair_id, raw_items, fallback, ts)| {
                let at = chrono::Utc.timestamp_opt(ts, 0).unwrap();
                let items: Vec<EvidenceItem> = raw_items
                    .into_iter()
                    .enumerate()
                    .map(|(rank, (url, caption))| EvidenceItem {
                        source_url: url,
                        caption: format!("c{caption}"),
                        retrieval_rank: rank,
                        fetched_at: at,
                    })
                    .collect();
                let fallback = if items.is_empty() { fallback } else { None };
                EvidenceSet::new(pair_id, items, fallback)
            })
    }

    proptest! {
        #[test]
        fn cache_round_trip_is_identity(set in arb_evidence_set()) {
            let dir = tempfile::tempdir().unwrap();
            let cache = EvidenceCache::new(dir.path().to_path_buf()).unwrap();
            cache.put(&set).unwrap();
            let got = cache.get(&set.pair_id).unwrap().unwrap();
            prop_assert_eq!(got, set);
        }

        #[test]
        fn serde_round_trip_is_identity(set in arb_evidence_set()) {
            let bytes = serde_json::to_vec(&set).unwrap();
            let back: EvidenceSet = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
