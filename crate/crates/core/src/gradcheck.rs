//! Finite-difference verification of the training gradients, per parameter group.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_task, split_base_novel, DataSpec};
use crate::encoders::{EncoderConfig, FrozenEncoderParams};
use crate::error::Result;
use crate::model::{AblationMode, CachedSet, ModelBundle, ParamGroup, TextCache};
use crate::nn::NamedTensors;
use crate::objective::{compute_class_prototypes, draw_noise, elbo_loss, Batch, PrototypeTable};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;
use crate::train::step_gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, for gradients that are essentially zero.
    pub floor: f64,
    /// Randomly chosen coordinates checked in each tensor.
    pub coords_per_tensor: usize,
    pub batch_size: usize,
    /// Std of the Gaussian jitter added to every trainable value before checking,
    /// so biases and prompts are not at their special initial values.
    pub jitter_std: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            coords_per_tensor: 6,
            batch_size: 4,
            jitter_std: 0.05,
            beta: 1.0,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub mode: AblationMode,
    pub group: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic and central-difference gradients of the batch loss.
///
/// `corrupt` scales the analytic gradient of one group, to exercise the harness itself.
pub fn gradcheck_model(
    model: &mut ModelBundle,
    text: &TextCache,
    batch: &Batch<'_>,
    prototypes: Option<&PrototypeTable>,
    cfg: &GradcheckConfig,
    corrupt: Option<ParamGroup>,
) -> Result<Vec<GroupReport>> {
    let (_, _, grads) = step_gradients(model, text, batch, prototypes, cfg.beta)?;
    let names = model.prompts.names();
    let sizes: Vec<usize> = {
        let mut s = Vec::new();
        model.prompts.visit("", &mut |_, t| s.push(t.len()));
        s
    };
    let mut reports: Vec<GroupReport> = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let group = ParamGroup::of(name).expect("trainable names carry a group");
        let mut rng = stream(&[cfg.seed, purpose::GRADCHECK, ti as u64]);
        let coords: Vec<usize> =
            (0..cfg.coords_per_tensor.min(sizes[ti])).map(|_| rng.random_range(0..sizes[ti])).collect();
        let mut worst = 0.0_f64;
        for &i in &coords {
            let orig = value_at(model, ti, i);
            set_value(model, ti, i, orig + cfg.step);
            let plus = elbo_loss(model, text, batch, prototypes, cfg.beta)?.total;
            set_value(model, ti, i, orig - cfg.step);
            let minus = elbo_loss(model, text, batch, prototypes, cfg.beta)?.total;
            set_value(model, ti, i, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let mut analytic = grads[ti][i];
            if corrupt == Some(group) {
                analytic = analytic * 1.5 + 1e-3;
            }
            worst = worst.max(relative_error(analytic, numeric, cfg.floor));
        }
        match reports.iter_mut().find(|r| r.group == group.name()) {
            Some(r) => {
                r.checked += coords.len();
                r.max_rel_err = r.max_rel_err.max(worst);
            }
            None => reports.push(GroupReport {
                mode: model.mode,
                group: group.name(),
                checked: coords.len(),
                max_rel_err: worst,
                passed: true,
            }),
        }
    }
    for r in &mut reports {
        r.passed = r.max_rel_err <= cfg.tolerance;
    }
    Ok(reports)
}

fn value_at(model: &ModelBundle, tensor: usize, i: usize) -> f64 {
    let mut k = 0;
    let mut out = 0.0;
    model.prompts.visit("", &mut |_, t| {
        if k == tensor {
            out = t.data()[i];
        }
        k += 1;
    });
    out
}

fn set_value(model: &mut ModelBundle, tensor: usize, i: usize, v: f64) {
    let mut k = 0;
    model.prompts.visit_mut("", &mut |_, t: &mut Tensor| {
        if k == tensor {
            t.data_mut()[i] = v;
        }
        k += 1;
    });
}

/// Checks every trainable group of every mode on a small task built from `spec`.
pub fn gradcheck_all_modes(
    spec: &DataSpec,
    encoder: &EncoderConfig,
    cfg: &GradcheckConfig,
    corrupt: Option<ParamGroup>,
) -> Result<Vec<GroupReport>> {
    let task = generate_task(spec)?;
    let splits = split_base_novel(&task, spec.shots)?;
    let frozen = FrozenEncoderParams::build(encoder, &task, spec.seed)?;
    let train = CachedSet::build(encoder, &frozen, &splits.base_train)?;
    let classes = train.classes();
    let protos = compute_class_prototypes(&train.labels, &train.caches, &classes)?;
    let mut pick = stream(&[cfg.seed, purpose::GRADCHECK, u64::MAX]);
    let idx: Vec<usize> = (0..cfg.batch_size.min(train.len())).map(|_| pick.random_range(0..train.len())).collect();
    let mut reports = Vec::new();
    for mode in AblationMode::ALL {
        let mut model = ModelBundle::new(encoder.clone(), mode, frozen.clone(), cfg.seed)?;
        let mut jitter = stream(&[cfg.seed, purpose::GRADCHECK, 1 + mode as u64]);
        model.prompts.visit_mut("", &mut |_, t| {
            let noise = Tensor::randn(t.shape(), cfg.jitter_std, &mut jitter);
            for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *x += n;
            }
        });
        let text = TextCache::build(&model, &classes)?;
        let batch = Batch {
            images: idx.iter().map(|&i| &train.caches[i]).collect(),
            labels: idx.iter().map(|&i| train.labels[i]).collect(),
            noise: idx
                .iter()
                .map(|&i| draw_noise(&model, &mut stream(&[cfg.seed, purpose::GRADCHECK, train.ids[i]])))
                .collect(),
        };
        reports.extend(gradcheck_model(&mut model, &text, &batch, Some(&protos), cfg, corrupt)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
