//! Mode × seed comparison grid on a shared dataset.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::encoders::{EncoderConfig, FrozenEncoderParams};
use crate::error::Result;
use crate::infer::{evaluate, harmonic_mean, EvalConfig};
use crate::model::{AblationMode, CachedSet, ModelBundle};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Cached splits shared by every run of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationData {
    pub train: CachedSet,
    pub base_test: CachedSet,
    pub novel_test: CachedSet,
}

impl AblationData {
    pub fn build(cfg: &EncoderConfig, frozen: &FrozenEncoderParams, splits: &Splits) -> Result<Self> {
        Ok(Self {
            train: CachedSet::build(cfg, frozen, &splits.base_train)?,
            base_test: CachedSet::build(cfg, frozen, &splits.base_test)?,
            novel_test: CachedSet::build(cfg, frozen, &splits.novel_test)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub harmonic: f64,
}

/// A finished run of the grid.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub row: AblationRow,
    pub model: ModelBundle,
    pub outcome: TrainOutcome,
}

/// Trains one mode with one seed and scores both test splits.
pub fn run_one(
    encoder: &EncoderConfig,
    frozen: &FrozenEncoderParams,
    data: &AblationData,
    template: &TrainConfig,
    mode: AblationMode,
    seed: u64,
) -> Result<AblationRun> {
    let cfg = TrainConfig { mode, seed, ..template.clone() };
    let mut model = ModelBundle::new(encoder.clone(), mode, frozen.clone(), seed)?;
    let outcome = train(&cfg, &data.train, &mut model)?;
    let eval = EvalConfig { samples: cfg.samples, seed, source: cfg.inference_latent };
    let base_acc = evaluate(&model, &data.base_test, &eval)?.accuracy;
    let novel_acc = evaluate(&model, &data.novel_test, &eval)?.accuracy;
    Ok(AblationRun {
        row: AblationRow { mode, seed, base_acc, novel_acc, harmonic: harmonic_mean(base_acc, novel_acc) },
        model,
        outcome,
    })
}

/// Runs every `(mode, seed)` pair in mode-major order; `on_run` sees each finished run.
pub fn ablate(
    encoder: &EncoderConfig,
    frozen: &FrozenEncoderParams,
    data: &AblationData,
    template: &TrainConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    on_run: &mut dyn FnMut(&AblationRun),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len() * seeds.len());
    for &mode in modes {
        for &seed in seeds {
            let run = run_one(encoder, frozen, data, template, mode, seed)?;
            on_run(&run);
            rows.push(run.row);
        }
    }
    Ok(rows)
}

/// Seed-paired comparison of novel accuracy between two modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub baseline: AblationMode,
    pub candidate: AblationMode,
    pub pairs: usize,
    /// Seeds where the candidate scores at least as well.
    pub wins: usize,
    pub mean_delta: f64,
}

pub fn compare_novel(rows: &[AblationRow], baseline: AblationMode, candidate: AblationMode) -> PairedComparison {
    let mut deltas = Vec::new();
    for a in rows.iter().filter(|r| r.mode == baseline) {
        if let Some(b) = rows.iter().find(|r| r.mode == candidate && r.seed == a.seed) {
            deltas.push(b.novel_acc - a.novel_acc);
        }
    }
    PairedComparison {
        baseline,
        candidate,
        pairs: deltas.len(),
        wins: deltas.iter().filter(|&&d| d >= 0.0).count(),
        mean_delta: if deltas.is_empty() { 0.0 } else { deltas.iter().sum::<f64>() / deltas.len() as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: AblationMode, seed: u64, novel: f64) -> AblationRow {
        AblationRow { mode, seed, base_acc: 0.5, novel_acc: novel, harmonic: 0.0 }
    }

    #[test]
    fn comparison_pairs_by_seed() {
        use AblationMode::*;
        let rows = [
            row(TaskShared, 0, 0.5),
            row(TaskShared, 1, 0.6),
            row(SampleDeterministic, 1, 0.55),
            row(SampleDeterministic, 0, 0.5),
            row(SampleDeterministic, 7, 0.9),
        ];
        let c = compare_novel(&rows, TaskShared, SampleDeterministic);
        assert_eq!((c.pairs, c.wins), (2, 1));
        assert!((c.mean_delta - (-0.025)).abs() < 1e-12);
    }
}
