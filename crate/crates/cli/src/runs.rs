//! Run directories and manifests.
//!
//! Every command writes its artifacts under `output_dir/<run_id>/` together
//! with a manifest holding the effective config snapshot, the seed, and a
//! content hash of the active prompt templates; under mock backends that is
//! enough to reproduce the run bit-identically.

use crate::config::FileConfig;
use ooc_engine::pipeline::Pipeline;
use rand::Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub run_id: String,
    pub command: String,
    pub created_utc: String,
    pub seed: u64,
    pub templates_hash: String,
    pub dataset_path: Option<String>,
    pub config: &'a FileConfig,
}

/// Timestamp plus a random suffix so concurrent sweeps never clobber each
/// other.
pub fn new_run_id() -> String {
    let now = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let suffix: u32 = rand::thread_rng().gen_range(0..0xffff);
    format!("{now}-{suffix:04x}")
}

pub struct RunDir {
    pub run_id: String,
    pub dir: PathBuf,
}

impl RunDir {
    pub fn create(output_dir: &Path) -> std::io::Result<Self> {
        let run_id = new_run_id();
        let dir = output_dir.join(&run_id);
        std::fs::create_dir_all(&dir)?;
        Ok(Self { run_id, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_manifest(
        &self,
        command: &str,
        cfg: &FileConfig,
        pipeline: &Pipeline,
        dataset_path: Option<&Path>,
    ) -> std::io::Result<()> {
        let manifest = Manifest {
            run_id: self.run_id.clone(),
            command: command.to_string(),
            created_utc: chrono::Utc::now().to_rfc3339(),
            seed: cfg.seed,
            templates_hash: pipeline.templates().content_hash(),
            dataset_path: dataset_path.map(|p| p.display().to_string()),
            config: cfg,
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.path("manifest.json"), body)
    }
}
