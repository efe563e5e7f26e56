//! The training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::argmax;
use crate::error::{Error, Result};
use crate::model::{AblationMode, CachedSet, LatentSource, ModelBundle, TextCache};
use crate::objective::{compute_class_prototypes, draw_noise, elbo_on_tape, Batch, LossBreakdown, PrototypeTable};
use crate::optim::AdamW;
use crate::rng::{purpose, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Fraction of all steps over which β ramps up linearly when warmup is on.
pub const BETA_WARMUP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta: f64,
    pub beta_warmup: bool,
    pub mode: AblationMode,
    /// Monte Carlo draws per prediction at evaluation time.
    pub samples: usize,
    /// Latent source at evaluation time.
    pub inference_latent: LatentSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            beta: 1.0,
            beta_warmup: false,
            mode: AblationMode::VariationalClassPrior,
            samples: 10,
            inference_latent: LatentSource::Posterior,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// KL weight at optimizer step `step` (0-based) of `total_steps`.
    pub fn beta_at(&self, step: u64, total_steps: u64) -> f64 {
        if !self.beta_warmup {
            return self.beta;
        }
        let ramp = BETA_WARMUP_FRACTION * total_steps as f64;
        if ramp <= 0.0 {
            self.beta
        } else {
            self.beta * ((step + 1) as f64 / ramp).min(1.0)
        }
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    pub base_train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub prototypes: Option<PrototypeTable>,
    /// Optimizer steps taken.
    pub steps: u64,
    /// Names of the tensors that were updated.
    pub trainable: Vec<String>,
}

/// Trains the prompt parameters of `model` on `train_set` in place.
pub fn train(cfg: &TrainConfig, train_set: &CachedSet, model: &mut ModelBundle) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != model.mode {
        return Err(Error::Config(format!("config mode {} does not match model mode {}", cfg.mode, model.mode)));
    }
    if train_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    let frozen_hash = model.frozen.fingerprint();
    let classes = train_set.classes();
    let text = TextCache::build(model, &classes)?;
    let prototypes = match model.mode {
        AblationMode::VariationalClassPrior => {
            Some(compute_class_prototypes(&train_set.labels, &train_set.caches, &classes)?)
        }
        _ => None,
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(&[cfg.seed, purpose::SHUFFLE, epoch as u64]));
        let (mut nll, mut kl, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let beta = cfg.beta_at(opt.step, total_steps);
            let batch = Batch {
                images: idx.iter().map(|&i| &train_set.caches[i]).collect(),
                labels: idx.iter().map(|&i| train_set.labels[i]).collect(),
                noise: idx
                    .iter()
                    .map(|&i| {
                        let mut rng = stream(&[cfg.seed, purpose::TRAIN_NOISE, epoch as u64, train_set.ids[i], 0]);
                        draw_noise(model, &mut rng)
                    })
                    .collect(),
            };
            let (loss, hits, grads) = step_gradients(model, &text, &batch, prototypes.as_ref(), beta)
                .map_err(|e| diverged(epoch, bi, train_set, idx, e))?;
            if !(loss.total.is_finite() && loss.nll.is_finite() && loss.kl.is_finite()) {
                return Err(diverged(epoch, bi, train_set, idx, Error::NonFinite("loss")));
            }
            debug_assert!((loss.total - (loss.nll + beta * loss.kl)).abs() <= 1e-12 * (1.0 + loss.total.abs()));
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
            collect_mut(model, &mut params);
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut params, &grad_refs)?;
            let w = idx.len() as f64;
            nll += loss.nll * w;
            kl += loss.kl * w;
            total += loss.total * w;
            correct += hits;
        }
        let nf = n as f64;
        history.push(EpochMetrics {
            epoch,
            nll: nll / nf,
            kl: kl / nf,
            total: total / nf,
            base_train_acc: correct as f64 / nf,
        });
    }
    if model.frozen.fingerprint() != frozen_hash {
        return Err(Error::Config("frozen encoder parameters changed during training".into()));
    }
    Ok(TrainOutcome { history, prototypes, steps: opt.step, trainable: model.prompts.names() })
}

fn collect_mut<'a>(model: &'a mut ModelBundle, out: &mut Vec<&'a mut Tensor>) {
    let p = &mut model.prompts;
    out.extend(p.vision.iter_mut());
    out.extend(p.text.iter_mut());
    for net in p.generators.iter_mut().chain(p.posterior.iter_mut()).chain(p.prior.iter_mut()) {
        for lin in [&mut net.fc1, &mut net.fc2] {
            out.push(&mut lin.weight);
            out.push(&mut lin.bias);
        }
    }
}

/// Loss, number of correct argmax predictions, and gradients in visiting order.
pub fn step_gradients(
    model: &ModelBundle,
    text: &TextCache,
    batch: &Batch<'_>,
    prototypes: Option<&PrototypeTable>,
    beta: f64,
) -> Result<(LossBreakdown, usize, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.prompts.register(&mut tape);
    let l = elbo_on_tape(&mut tape, model, &vars, text, batch, prototypes, beta)?;
    let c = text.classes.len();
    let logits = tape.value(l.forward.logits);
    let hits = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| text.classes[argmax(&logits[i * c..(i + 1) * c])] == y)
        .count();
    let loss = LossBreakdown {
        total: tape.scalar_value(l.total),
        nll: tape.scalar_value(l.nll),
        kl: tape.scalar_value(l.kl),
        kl_weight: beta,
    };
    tape.backward(l.total)?;
    let grads = vars
        .all
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; tape.value(v).len()]))
        .collect();
    Ok((loss, hits, grads))
}

fn diverged(epoch: usize, batch: usize, set: &CachedSet, idx: &[usize], cause: Error) -> Error {
    match cause {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            batch,
            detail: format!(
                "non-finite value in {op}; example ids {:?}, labels {:?}",
                idx.iter().map(|&i| set.ids[i]).collect::<Vec<_>>(),
                idx.iter().map(|&i| set.labels[i]).collect::<Vec<_>>()
            ),
        },
        other => other,
    }
}
