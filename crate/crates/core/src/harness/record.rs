//! Append-only JSON-lines run records.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top5: Option<f64>,
    pub seconds: f64,
}

/// Accuracy on a split plus the model's cost figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: String,
    pub samples: usize,
    /// Percent.
    pub top1: f64,
    /// Percent.
    pub top5: f64,
    /// Median per-image forward time at batch 1 over 100 warm runs.
    pub latency_ms: f64,
    pub params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub record_version: u32,
    pub kind: String,
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the config without its toggles; equal across ablation arms.
    pub fairness_hash: String,
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
    pub status: RunStatus,
    pub epochs: Vec<EpochMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalMetrics>,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn top1(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.top1)
    }
}

/// A standalone evaluation of a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record_version: u32,
    pub kind: String,
    pub checkpoint: PathBuf,
    pub metrics: EvalMetrics,
}

/// Appends one JSON line. The line is written with a single `write` on an
/// append-mode handle, so concurrent writers do not interleave records.
pub fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads every run record in a JSON-lines file, skipping other record kinds.
pub fn read_run_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("train") {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}
