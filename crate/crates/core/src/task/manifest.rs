use super::TaskError;
use crate::seed::SeedState;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub global_step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    /// Value of the task's configured metric.
    pub val_metric: f64,
}

/// Checkpoint files of one snapshot, relative to the run directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointSet {
    pub epoch: usize,
    pub full: PathBuf,
    pub backbone: PathBuf,
    pub header: PathBuf,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestRecord {
    pub checkpoint: String,
    pub pages: Vec<String>,
    pub predictions: Vec<PathBuf>,
    pub report: PathBuf,
    pub summary: PathBuf,
    pub miou: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
}

/// Everything needed to rerun and audit one run. Paths are relative to
/// `run_dir`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub run_dir: PathBuf,
    pub experiment: String,
    pub seed: u64,
    pub seeds: SeedState,
    pub config_snapshot: PathBuf,
    pub metrics_log: PathBuf,
    pub metric_name: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoints: BTreeMap<String, CheckpointSet>,
    pub test: Option<TestRecord>,
}

impl RunManifest {
    pub fn save(&self) -> Result<PathBuf, TaskError> {
        let path = self.run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|source| TaskError::Io { path: path.display().to_string(), source })?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> Result<Self, TaskError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| TaskError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| TaskError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    /// Per-epoch train losses in order.
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}
