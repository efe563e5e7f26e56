//! Machine-readable outputs: headered CSV tables and the evaluation JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vamp_core::ablate::AblationRow;
use vamp_core::infer::EvalReport;
use vamp_core::model::{AblationMode, LatentSource};
use vamp_core::train::EpochMetrics;

use crate::error::{Result, VampError};

/// Identifier of the evaluation document layout (see `docs/eval.schema.json`).
pub const EVAL_SCHEMA: &str = "vamp-eval/1";

/// One line of the training metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    pub base_train_acc: f64,
    pub config_sha256: String,
}

/// One line of the ablation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub mode: AblationMode,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub harmonic: f64,
    pub config_sha256: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let csv_err = |source| VampError::Csv { path: path.to_owned(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| VampError::io(path, e))
}

pub fn write_train_metrics(path: &Path, history: &[EpochMetrics], digest: &str) -> Result<()> {
    write_csv(
        path,
        history.iter().map(|m| TrainRecord {
            epoch: m.epoch,
            nll: m.nll,
            kl: m.kl,
            total: m.total,
            base_train_acc: m.base_train_acc,
            config_sha256: digest.to_owned(),
        }),
    )
}

pub fn write_ablation(path: &Path, rows: &[AblationRow], digest: &str) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| AblationRecord {
            mode: r.mode,
            seed: r.seed,
            base_acc: r.base_acc,
            novel_acc: r.novel_acc,
            harmonic: r.harmonic,
            config_sha256: digest.to_owned(),
        }),
    )
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| VampError::Csv { path: path.to_owned(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub accuracy: f64,
    pub examples: usize,
    pub per_class: Vec<ClassRecord>,
}

impl From<&EvalReport> for SplitRecord {
    fn from(r: &EvalReport) -> Self {
        Self {
            accuracy: r.accuracy,
            examples: r.predictions.len(),
            per_class: r
                .per_class
                .iter()
                .map(|c| ClassRecord { class: c.class, correct: c.correct, total: c.total, accuracy: c.accuracy() })
                .collect(),
        }
    }
}

/// The evaluation document written by `vamp eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDocument {
    pub schema: String,
    pub mode: AblationMode,
    pub samples: usize,
    pub seed: u64,
    pub latent: LatentSource,
    /// Keyed by `base` and/or `novel`.
    pub splits: BTreeMap<String, SplitRecord>,
    /// Present when both splits were evaluated.
    pub harmonic_mean: Option<f64>,
    pub config_sha256: String,
    pub config: String,
}
