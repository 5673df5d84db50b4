use std::path::Path;
use std::time::Instant;

use pego_core::checkpoint::sha256_hex;
use pego_core::report::write_atomic;
use pego_core::{PegoError, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Provenance of one command invocation, written last and atomically.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub version: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub dataset_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    config: TrainConfig,
    dataset_hash: Option<String>,
    seeds: Vec<u64>,
    jobs: usize,
    artifacts: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(config: &TrainConfig, dataset: Option<&Path>, seeds: Vec<u64>, jobs: usize) -> Result<Self> {
        let dataset_hash = match dataset {
            Some(p) => Some(sha256_hex(&std::fs::read(p).map_err(|e| PegoError::Io {
                path: p.to_path_buf(),
                source: e,
            })?)),
            None => None,
        };
        Ok(Self {
            started: Instant::now(),
            config: config.clone(),
            dataset_hash,
            seeds,
            jobs,
            artifacts: Vec::new(),
        })
    }

    pub fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    pub fn write(self, out_dir: &Path) -> Result<()> {
        let m = RunManifest {
            command_line: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config.digest(),
            config: self.config,
            dataset_hash: self.dataset_hash,
            seeds: self.seeds,
            jobs: self.jobs,
            artifacts: self.artifacts,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_atomic(&out_dir.join("manifest.json"), json.as_bytes())
    }
}
