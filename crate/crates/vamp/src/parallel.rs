//! Thread-pool scoped helpers. Every result is independent of the worker count because
//! all randomness comes from per-example keyed streams.

use rayon::prelude::*;
use vamp_core::ablate::{run_one, AblationData, AblationRun};
use vamp_core::encoders::{EncoderConfig, FrozenEncoderParams, ImageCache};
use vamp_core::infer::{inference_noise, predict_with_noise, score, EvalConfig, EvalReport, PREDICT_CHUNK};
use vamp_core::model::{AblationMode, CachedSet, ModelBundle, TextCache};
use vamp_core::train::TrainConfig;

use crate::error::{Result, VampError};

/// Runs `f` on a dedicated pool of `threads` workers (at least one).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| VampError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

/// Same output as `vamp_core::infer::predict_set`, with chunks spread over the current pool.
pub fn predict_set(
    model: &ModelBundle,
    text: &TextCache,
    set: &CachedSet,
    cfg: &EvalConfig,
) -> vamp_core::Result<Vec<Vec<f64>>> {
    if cfg.samples == 0 {
        return Err(vamp_core::Error::Config("at least one sample is required".into()));
    }
    let samples = if model.mode.is_variational() { cfg.samples } else { 1 };
    let starts: Vec<usize> = (0..set.len()).step_by(PREDICT_CHUNK).collect();
    let chunks: Vec<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + PREDICT_CHUNK).min(set.len());
            let images: Vec<&ImageCache> = set.caches[start..end].iter().collect();
            let noise: Vec<Vec<Vec<f64>>> = if model.mode.is_variational() {
                set.ids[start..end]
                    .iter()
                    .map(|&id| (0..samples).map(|s| inference_noise(model, cfg.seed, id, s)).collect())
                    .collect()
            } else {
                Vec::new()
            };
            predict_with_noise(model, text, &images, &noise, cfg.source)
        })
        .collect::<vamp_core::Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Accuracy over the classes present in `set`.
pub fn evaluate(model: &ModelBundle, set: &CachedSet, cfg: &EvalConfig) -> vamp_core::Result<EvalReport> {
    if set.is_empty() {
        return Err(vamp_core::Error::EmptySplit);
    }
    let classes = set.classes();
    let text = TextCache::build(model, &classes)?;
    let probs = predict_set(model, &text, set, cfg)?;
    score(&probs, &set.labels, &classes)
}

/// Every `(mode, seed)` run of a grid, in mode-major order, trained concurrently.
pub fn ablate(
    encoder: &EncoderConfig,
    frozen: &FrozenEncoderParams,
    data: &AblationData,
    template: &TrainConfig,
    modes: &[AblationMode],
    seeds: &[u64],
) -> vamp_core::Result<Vec<AblationRun>> {
    let grid: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    grid.par_iter().map(|&(mode, seed)| run_one(encoder, frozen, data, template, mode, seed)).collect()
}
