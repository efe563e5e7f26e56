//! Class prototypes, the layer-summed ELBO and the marginal-likelihood diagnostic.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoders::{classify_logits, encode_image, encode_text, ImageCache, PromptStack};
use crate::error::{dim_err, Error, Result};
use crate::model::{AblationMode, Forward, LatentSource, ModelBundle, TextCache, TrainableVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{gaussian_on_tape, posterior_params, prior_params, DiagGaussian};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean promptless image feature per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub classes: Vec<usize>,
    /// `[d_vl]` per entry of `classes`.
    pub prototypes: Vec<Tensor>,
    pub counts: Vec<usize>,
}

impl PrototypeTable {
    pub fn get(&self, class: usize) -> Option<&Tensor> {
        self.classes.iter().position(|&c| c == class).map(|i| &self.prototypes[i])
    }

    pub fn require(&self, class: usize) -> Result<&Tensor> {
        self.get(class).ok_or(Error::MissingClass(class))
    }
}

/// Elementwise sum of equal-length rows by recursive halving.
pub fn pairwise_sum(rows: &[&[f64]]) -> Vec<f64> {
    match rows {
        [] => Vec::new(),
        [one] => one.to_vec(),
        _ => {
            let (a, b) = rows.split_at(rows.len() / 2);
            let mut left = pairwise_sum(a);
            for (l, r) in left.iter_mut().zip(pairwise_sum(b)) {
                *l += r;
            }
            left
        }
    }
}

/// `o_y` = mean frozen feature of the examples labelled `y`, for every class in `classes`.
pub fn compute_class_prototypes(labels: &[usize], caches: &[ImageCache], classes: &[usize]) -> Result<PrototypeTable> {
    if labels.len() != caches.len() {
        return Err(dim_err("compute_class_prototypes", &[labels.len()], &[caches.len()]));
    }
    let mut prototypes = Vec::with_capacity(classes.len());
    let mut counts = Vec::with_capacity(classes.len());
    for &c in classes {
        let rows: Vec<&[f64]> =
            labels.iter().zip(caches).filter(|(&l, _)| l == c).map(|(_, cache)| cache.frozen_feature.data()).collect();
        if rows.is_empty() {
            return Err(Error::MissingClass(c));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = pairwise_sum(&rows).into_iter().map(|s| s / n).collect();
        prototypes.push(Tensor::new(&[mean.len()], mean)?);
        counts.push(rows.len());
    }
    Ok(PrototypeTable { classes: classes.to_vec(), prototypes, counts })
}

/// Components of the minimized objective `nll + β·kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    /// Batch mean of the layer-summed KL.
    pub kl: f64,
    pub kl_weight: f64,
}

/// A training batch over cached images.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub images: Vec<&'a ImageCache>,
    /// Global class ids.
    pub labels: Vec<usize>,
    /// One reparameterization draw per image (`H·M·d_l` values); empty means zero noise.
    pub noise: Vec<Vec<f64>>,
}

/// `H·M·d_l` standard normal values for one draw.
pub fn draw_noise<R: Rng + ?Sized>(model: &ModelBundle, rng: &mut R) -> Vec<f64> {
    (0..model.noise_len()).map(|_| rng.sample(StandardNormal)).collect()
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
    pub forward: Forward,
}

/// Prior input rows `[E × d_vl]` (the prototype of each label).
fn prototype_rows(tape: &mut Tape, protos: &PrototypeTable, labels: &[usize]) -> Result<Var> {
    let mut data = Vec::new();
    for &y in labels {
        data.extend_from_slice(protos.require(y)?.data());
    }
    let width = data.len() / labels.len().max(1);
    tape.constant(&[labels.len(), width], data)
}

/// Records the negated ELBO of `batch` on `tape`.
pub fn elbo_on_tape(
    tape: &mut Tape,
    model: &ModelBundle,
    vars: &TrainableVars,
    text: &TextCache,
    batch: &Batch<'_>,
    prototypes: Option<&PrototypeTable>,
    beta: f64,
) -> Result<LossVars> {
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(beta >= 0.0) {
        return Err(Error::Config("β must be non-negative".into()));
    }
    if batch.labels.len() != batch.images.len() {
        return Err(dim_err("batch labels", &[batch.labels.len()], &[batch.images.len()]));
    }
    let targets: Vec<usize> = batch
        .labels
        .iter()
        .map(|&y| text.position(y).ok_or(Error::UnknownClass { id: y, count: text.classes.len() }))
        .collect::<Result<_>>()?;
    let forward = model.forward_batch(tape, vars, text, &batch.images, 1, &batch.noise, LatentSource::Posterior)?;
    let nll = tape.cross_entropy(forward.logits, &targets)?;
    let e = batch.images.len();
    let (m, dl) = (model.encoder.prompt_tokens, model.encoder.text_width);
    let mut kl: Option<Var> = None;
    match model.mode {
        AblationMode::VariationalStdPrior => {
            let zeros = tape.constant(&[e * m, dl], vec![0.0; e * m * dl])?;
            for g in &forward.posterior {
                let k = tape.kl_diag(g.mu, g.log_var, zeros, zeros)?;
                kl = Some(match kl {
                    Some(acc) => tape.add(acc, k)?,
                    None => k,
                });
            }
        }
        AblationMode::VariationalClassPrior => {
            let protos = prototypes.ok_or_else(|| Error::Config("class-aware prior needs prototypes".into()))?;
            let input = prototype_rows(tape, protos, &batch.labels)?;
            for (g, net) in forward.posterior.iter().zip(&vars.prior) {
                let p = gaussian_on_tape(tape, net, input, m, dl)?;
                let k = tape.kl_diag(g.mu, g.log_var, p.mu, p.log_var)?;
                kl = Some(match kl {
                    Some(acc) => tape.add(acc, k)?,
                    None => k,
                });
            }
        }
        AblationMode::TaskShared | AblationMode::SampleDeterministic => {}
    }
    let kl = match kl {
        Some(sum) => tape.scale(sum, 1.0 / e as f64)?,
        None => tape.constant(&[1], vec![0.0])?,
    };
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(nll, weighted)?;
    Ok(LossVars { total, nll, kl, forward })
}

/// Negated single-draw ELBO of `batch` (cross-entropy alone in deterministic modes).
pub fn elbo_loss(
    model: &ModelBundle,
    text: &TextCache,
    batch: &Batch<'_>,
    prototypes: Option<&PrototypeTable>,
    beta: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.prompts.register(&mut tape);
    let l = elbo_on_tape(&mut tape, model, &vars, text, batch, prototypes, beta)?;
    Ok(LossBreakdown {
        total: tape.scalar_value(l.total),
        nll: tape.scalar_value(l.nll),
        kl: tape.scalar_value(l.kl),
        kl_weight: beta,
    })
}

impl ModelBundle {
    /// Prompts used for one image when every latent sits at its mean.
    pub fn mean_prompts(&self, frozen_feature: &Tensor) -> Result<PromptStack> {
        let cfg = &self.encoder;
        let p = &self.prompts;
        let (m, dl) = (cfg.prompt_tokens, cfg.text_width);
        let text = match self.mode {
            AblationMode::TaskShared => p.layers.iter().copied().zip(p.text.iter().cloned()).collect(),
            AblationMode::SampleDeterministic => {
                crate::variational::generate_prompts_deterministic(frozen_feature, &p.generators, &p.layers, m, dl)?
            }
            AblationMode::VariationalStdPrior | AblationMode::VariationalClassPrior => {
                posterior_params(frozen_feature, &p.posterior, &p.layers, m, dl)?
                    .into_iter()
                    .map(|(l, d)| (l, d.mu))
                    .collect()
            }
        };
        Ok(PromptStack { text, vision: p.layers.iter().copied().zip(p.vision.iter().cloned()).collect() })
    }

    /// Layer posteriors `q(z_i | x)` for one image.
    pub fn posterior(&self, frozen_feature: &Tensor) -> Result<BTreeMap<usize, DiagGaussian>> {
        if !self.mode.is_variational() {
            return Err(Error::Config(alloc::format!("{} has no posterior", self.mode)));
        }
        let cfg = &self.encoder;
        posterior_params(
            frozen_feature,
            &self.prompts.posterior,
            &self.prompts.layers,
            cfg.prompt_tokens,
            cfg.text_width,
        )
    }
}

/// Cross-entropy of the mean-prompted model, computed one image and class at a time
/// through the full (uncached) encoders.
pub fn deterministic_cross_entropy(
    model: &ModelBundle,
    images: &[&Tensor],
    labels: &[usize],
    classes: &[usize],
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(dim_err("deterministic_cross_entropy", &[images.len()], &[labels.len()]));
    }
    let cfg = &model.encoder;
    let mut total = 0.0;
    for (patches, &y) in images.iter().zip(labels) {
        let fbar = encode_image(cfg, &model.frozen, patches, None)?;
        let prompts = model.mean_prompts(&fbar)?;
        let fx = encode_image(cfg, &model.frozen, patches, Some(&prompts))?;
        let mut rows = Vec::with_capacity(classes.len() * cfg.embed_dim);
        for &c in classes {
            rows.extend_from_slice(encode_text(cfg, &model.frozen, c, Some(&prompts))?.data());
        }
        let texts = Tensor::new(&[classes.len(), cfg.embed_dim], rows)?;
        let cls = classify_logits(&fx, &texts, cfg.temperature)?;
        let t = classes.iter().position(|&c| c == y).ok_or(Error::UnknownClass { id: y, count: classes.len() })?;
        let max = cls.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(cls.logits.iter().map(|l| libm::exp(l - max)).sum::<f64>());
        total += lse - cls.logits[t];
    }
    Ok(total / images.len() as f64)
}

/// Which distribution plays `p(z | x)` in the marginal-likelihood integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MllReference {
    /// The posterior itself: predictive `log E_q[p(y|x,z)]` versus `E_q[log p(y|x,z)]`.
    Posterior,
    /// The model's prior (standard normal or class-aware): importance sampling with `q` as proposal.
    Prior,
}

/// Monte Carlo estimates sharing one set of posterior draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MllEstimate {
    pub elbo_est: f64,
    pub mll_est: f64,
    pub elbo_se: f64,
    /// Delta-method standard error of the log-mean-exp estimate.
    pub mll_se: f64,
    pub n_draws: usize,
}

impl MllEstimate {
    pub fn combined_se(&self) -> f64 {
        libm::sqrt(self.elbo_se * self.elbo_se + self.mll_se * self.mll_se)
    }
}

/// Draws per tape when evaluating many latent samples of one image.
const MLL_CHUNK: usize = 250;

/// Estimates the ELBO and `log p(y | x)` from `n_draws` posterior samples.
#[allow(clippy::too_many_arguments)]
pub fn marginal_log_likelihood_lower_bound_check<R: Rng + ?Sized>(
    model: &ModelBundle,
    text: &TextCache,
    image: &ImageCache,
    label: usize,
    prototypes: Option<&PrototypeTable>,
    n_draws: usize,
    reference: MllReference,
    rng: &mut R,
) -> Result<MllEstimate> {
    if n_draws < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n_draws });
    }
    let cfg = &model.encoder;
    let (m, dl) = (cfg.prompt_tokens, cfg.text_width);
    let q = model.posterior(&image.frozen_feature)?;
    let p = match (reference, model.mode) {
        (MllReference::Posterior, _) => None,
        (MllReference::Prior, AblationMode::VariationalClassPrior) => {
            let protos = prototypes.ok_or_else(|| Error::Config("class-aware prior needs prototypes".into()))?;
            Some(prior_params(protos.require(label)?, &model.prompts.prior, &model.prompts.layers, m, dl)?)
        }
        (MllReference::Prior, _) => Some(q.keys().map(|&l| (l, DiagGaussian::standard(&[m, dl]))).collect()),
    };
    let target = text.position(label).ok_or(Error::UnknownClass { id: label, count: text.classes.len() })?;
    let c = text.classes.len();
    let mut w = Vec::with_capacity(n_draws);
    let mut done = 0;
    while done < n_draws {
        let n = MLL_CHUNK.min(n_draws - done);
        let noise: Vec<Vec<f64>> = (0..n).map(|_| draw_noise(model, rng)).collect();
        let mut tape = Tape::new();
        let vars = model.prompts.register(&mut tape);
        let f = model.forward_batch(&mut tape, &vars, text, &[image], n, &noise, LatentSource::Posterior)?;
        let logits = tape.value(f.logits);
        for (s, eps) in noise.iter().enumerate() {
            let row = &logits[s * c..(s + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|l| libm::exp(l - max)).sum::<f64>());
            let mut ll = row[target] - lse;
            if let Some(p) = &p {
                let mut log_ratio = 0.0;
                for (k, (l, qd)) in q.iter().enumerate() {
                    let pd = &p[l];
                    let e = &eps[k * m * dl..(k + 1) * m * dl];
                    for (i, &ei) in e.iter().enumerate() {
                        let (mq, lq) = (qd.mu.data()[i], qd.log_var.data()[i]);
                        let (mp, lp) = (pd.mu.data()[i], pd.log_var.data()[i]);
                        let z = mq + libm::exp(0.5 * lq) * ei;
                        let log_q = -0.5 * (ei * ei + lq + LN_2PI);
                        let log_p = -0.5 * ((z - mp) * (z - mp) * libm::exp(-lp) + lp + LN_2PI);
                        log_ratio += log_p - log_q;
                    }
                }
                ll += log_ratio;
            }
            w.push(ll);
        }
        done += n;
    }
    Ok(summarize_log_weights(&w))
}

/// Mean, log-mean-exp and their standard errors for a set of log weights.
pub fn summarize_log_weights(w: &[f64]) -> MllEstimate {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = w.iter().map(|x| libm::exp(x - max)).collect();
    let smean = scaled.iter().sum::<f64>() / n;
    let svar = scaled.iter().map(|x| (x - smean) * (x - smean)).sum::<f64>() / (n - 1.0);
    MllEstimate {
        elbo_est: mean,
        mll_est: max + libm::log(smean),
        elbo_se: libm::sqrt(var / n),
        mll_se: libm::sqrt(svar / n) / smean,
        n_draws: w.len(),
    }
}
