//! Monte Carlo prediction and evaluation metrics.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{argmax, ImageCache};
use crate::error::{Error, Result};
use crate::model::{CachedSet, LatentSource, ModelBundle, TextCache};
use crate::objective::draw_noise;
use crate::rng::{purpose, stream};
use crate::tape::Tape;

/// Images per tape during batched prediction.
pub const PREDICT_CHUNK: usize = 4;

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Running mean, exact when every term is identical.
fn accumulate(mean: &mut [f64], p: &[f64], k: usize) {
    for (m, v) in mean.iter_mut().zip(p) {
        *m += (v - *m) / k as f64;
    }
}

/// Averaged class distributions for `images`, with `noise[e][s]` driving draw `s` of image `e`.
///
/// Deterministic modes ignore the noise and run a single pass.
pub fn predict_with_noise(
    model: &ModelBundle,
    text: &TextCache,
    images: &[&ImageCache],
    noise: &[Vec<Vec<f64>>],
    source: LatentSource,
) -> Result<Vec<Vec<f64>>> {
    let draws = if model.mode.is_variational() { noise.first().map_or(1, Vec::len).max(1) } else { 1 };
    if model.mode.is_variational() && (noise.len() != images.len() || noise.iter().any(|n| n.len() != draws)) {
        return Err(crate::error::dim_err("prediction noise", &[noise.len()], &[images.len(), draws]));
    }
    let flat: Vec<Vec<f64>> =
        if model.mode.is_variational() { noise.iter().flatten().cloned().collect() } else { Vec::new() };
    let mut tape = Tape::new();
    let vars = model.prompts.register(&mut tape);
    let f = model.forward_batch(&mut tape, &vars, text, images, draws, &flat, source)?;
    let c = text.classes.len();
    let logits = tape.value(f.logits);
    Ok((0..images.len())
        .map(|e| {
            let mut mean = alloc::vec![0.0; c];
            for s in 0..draws {
                let row = e * draws + s;
                accumulate(&mut mean, &softmax(&logits[row * c..(row + 1) * c]), s + 1);
            }
            mean
        })
        .collect())
}

/// `(1/S) Σ_s softmax(logits | z_s)` for one image, noise drawn from `rng`.
pub fn mc_predict<R: Rng + ?Sized>(
    model: &ModelBundle,
    text: &TextCache,
    image: &ImageCache,
    samples: usize,
    source: LatentSource,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Config("at least one sample is required".into()));
    }
    let noise: Vec<Vec<f64>> = (0..samples).map(|_| draw_noise(model, rng)).collect();
    Ok(predict_with_noise(model, text, &[image], &[noise], source)?.remove(0))
}

/// Evaluation-time settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub source: LatentSource,
}

/// Noise for draw `s` of example `id`: independent of batching and worker count.
pub fn inference_noise(model: &ModelBundle, seed: u64, id: u64, draw: usize) -> Vec<f64> {
    draw_noise(model, &mut stream(&[seed, purpose::INFER_NOISE, id, draw as u64]))
}

/// Averaged class distributions for every example of `set`.
pub fn predict_set(model: &ModelBundle, text: &TextCache, set: &CachedSet, cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.samples == 0 {
        return Err(Error::Config("at least one sample is required".into()));
    }
    let samples = if model.mode.is_variational() { cfg.samples } else { 1 };
    let mut out = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(PREDICT_CHUNK) {
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
        out.extend(predict_with_noise(model, text, &images, &noise, cfg.source)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy from class distributions over `classes`.
pub fn score(probs: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut per_class: Vec<ClassAccuracy> =
        classes.iter().map(|&class| ClassAccuracy { class, correct: 0, total: 0 }).collect();
    let mut predictions = Vec::with_capacity(labels.len());
    let mut correct = 0;
    for (p, &y) in probs.iter().zip(labels) {
        let pred = classes[argmax(p)];
        predictions.push(pred);
        let slot = classes.iter().position(|&c| c == y).ok_or(Error::UnknownClass { id: y, count: classes.len() })?;
        per_class[slot].total += 1;
        if pred == y {
            per_class[slot].correct += 1;
            correct += 1;
        }
    }
    Ok(EvalReport { accuracy: correct as f64 / labels.len() as f64, per_class, predictions })
}

/// Accuracy on `set`, classifying among the classes present in it.
pub fn evaluate(model: &ModelBundle, set: &CachedSet, cfg: &EvalConfig) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::EmptySplit);
    }
    let classes = set.classes();
    let text = TextCache::build(model, &classes)?;
    let probs = predict_set(model, &text, set, cfg)?;
    score(&probs, &set.labels, &classes)
}

/// `2·B·N / (B + N)`; zero when both are zero.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}
