//! Metrics records: one JSON document per run with the resolved config, the
//! per-epoch rows and a summary. Timing is kept out of these records (it goes
//! to the train log) so that repeated runs produce identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssalign_core::trainer::{AblationResult, EpochRecord, TrainConfig, TrainLog};

use crate::{write_file, IoError, IoResult};

/// Manifest paths a run was given, echoed as passed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub source: String,
    pub target_train: String,
    pub target_test: String,
}

/// One epoch without its timing field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_proto: f64,
    pub l_cross: f64,
    pub l_sn_dist: f64,
    pub l_sn_stat: f64,
    pub total: f64,
    pub test_accuracy: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(e: &EpochRecord) -> Self {
        Self {
            epoch: e.epoch,
            l_pred: e.l_pred,
            l_proto: e.l_proto,
            l_cross: e.l_cross,
            l_sn_dist: e.l_sn_dist,
            l_sn_stat: e.l_sn_stat,
            total: e.total,
            test_accuracy: e.test_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub command: String,
    pub data: DataPaths,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRow>,
    pub summary: TrainSummary,
}

impl TrainMetrics {
    pub fn new(data: DataPaths, config: TrainConfig, log: &TrainLog, checkpoint: String) -> Self {
        Self {
            command: "train".into(),
            data,
            config,
            epochs: log.epochs.iter().map(EpochRow::from).collect(),
            summary: TrainSummary {
                epochs: log.epochs.len(),
                final_accuracy: log.final_accuracy(),
                checkpoint,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub command: String,
    pub checkpoint: String,
    pub manifest: String,
    pub videos: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub command: String,
    pub data: DataPaths,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationMetrics {
    pub fn new(data: DataPaths, seeds: Vec<u64>, configs: &[TrainConfig], results: &[AblationResult]) -> Self {
        let rows = results
            .iter()
            .zip(configs)
            .map(|(r, c)| AblationRow {
                name: r.name.clone(),
                config: *c,
                accuracies: r.accuracies.clone(),
                mean_accuracy: r.mean_accuracy,
            })
            .collect();
        Self {
            command: "ablate".into(),
            data,
            seeds,
            rows,
        }
    }

    /// Fixed-width text table, one row per variant.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>8}", "variant", "mean");
        for s in &self.seeds {
            out.push_str(&format!("  {:>8}", format!("seed {s}")));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>8.4}", r.name, r.mean_accuracy));
            for a in &r.accuracies {
                out.push_str(&format!("  {a:>8.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> IoResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
