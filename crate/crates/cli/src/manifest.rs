use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use spikegrad_core::config::NetworkConfig;

use crate::{io_failure, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Everything needed to rerun a training job. Written before training starts
/// and rewritten with the end time and outputs when it finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub code_version: String,
    pub engine: String,
    pub seed: u64,
    pub threads: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub config: NetworkConfig,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub outputs: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

impl RunManifest {
    pub fn new(out_dir: &Path, command: &str, engine: &str, config: &NetworkConfig) -> Self {
        let started_at = now();
        Self {
            run_id: format!("{:016x}-{}", config.seed, (started_at * 1000.0) as u64),
            command: command.to_string(),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            engine: engine.to_string(),
            seed: config.seed,
            threads: rayon::current_num_threads(),
            train_limit: None,
            test_limit: None,
            config: config.clone(),
            started_at,
            finished_at: None,
            outputs: Vec::new(),
            path: out_dir.join(MANIFEST_FILE),
        }
    }

    /// Comment line that ties an artifact to this manifest.
    pub fn reference(&self) -> String {
        format!("# manifest={MANIFEST_FILE} run_id={}", self.run_id)
    }

    pub fn add_output(&mut self, path: &Path) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
    }

    pub fn write(&self) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::usage(e.to_string()))?;
        std::fs::write(&self.path, text + "\n").map_err(|e| io_failure(&self.path, e))
    }

    pub fn finish(&mut self) -> Result<(), Failure> {
        self.finished_at = Some(now());
        self.write()
    }
}
