//! Image-conditioned Gaussian prompt latents.
//!
//! Per prompted layer there is one independent two-layer MLP for each role:
//! deterministic prompt generator, posterior network and prior network. The
//! Gaussian nets emit `2·M·d` values, read as `M` rows of means followed by
//! `M` rows of log-variances.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::nn::{MlpParams, MlpVars};
use crate::tape::{kl_sum, Tape, Var};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over an `M × d` block of prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussian {
    /// Builds the distribution, clamping log-variances into `[-10, 10]`.
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(dim_err("DiagGaussian", mu.shape(), log_var.shape()));
        }
        let mut log_var = log_var;
        for v in log_var.data_mut() {
            *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self { mu: Tensor::zeros(shape), log_var: Tensor::zeros(shape) }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.data().iter().map(|l| libm::exp(0.5 * l)).collect()
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }
}

/// One reparameterized draw per prompted layer, with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPromptSample {
    pub z: BTreeMap<usize, Tensor>,
    pub eps: BTreeMap<usize, Tensor>,
}

/// Maps a width-`d_vl` vector through an MLP and reshapes to `[M × d]`.
fn mlp_rows(input: &Tensor, net: &MlpParams, rows: usize, width: usize) -> Result<Tensor> {
    if net.output_dim() != rows * width {
        return Err(Error::Config(format!("network output width {} does not match {rows}×{width}", net.output_dim())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(&[1, input.len()], input.data().to_vec())?;
    let vars = net.register(&mut tape, false);
    let y = vars.forward(&mut tape, x)?;
    tape.tensor(y).reshape(&[rows, width])
}

fn check_coverage(layers: &[usize], first: usize, nets: usize) -> Result<()> {
    if layers.len() != nets || layers.iter().enumerate().any(|(k, &l)| l != first + k) {
        return Err(Error::Config(format!(
            "networks cover {nets} layers, expected consecutive layers starting at {first}: {layers:?}"
        )));
    }
    Ok(())
}

/// Deterministic sample-specific prompts `z_i = Φ_i(f)` for each layer in `layers`.
pub fn generate_prompts_deterministic(
    feature: &Tensor,
    gens: &[MlpParams],
    layers: &[usize],
    tokens: usize,
    width: usize,
) -> Result<BTreeMap<usize, Tensor>> {
    if let Some(&first) = layers.first() {
        check_coverage(layers, first, gens.len())?;
    } else if !gens.is_empty() {
        return Err(Error::Config("generators given for an empty layer range".into()));
    }
    layers.iter().zip(gens).map(|(&l, net)| Ok((l, mlp_rows(feature, net, tokens, width)?))).collect()
}

fn gaussian_from_net(input: &Tensor, net: &MlpParams, tokens: usize, width: usize) -> Result<DiagGaussian> {
    if net.output_dim() != 2 * tokens * width {
        return Err(Error::Config(format!(
            "Gaussian network emits {} values, expected 2·{tokens}·{width}",
            net.output_dim()
        )));
    }
    let both = mlp_rows(input, net, 2 * tokens, width)?;
    let half = tokens * width;
    let mu = Tensor::new(&[tokens, width], both.data()[..half].to_vec())?;
    let lv = Tensor::new(&[tokens, width], both.data()[half..].to_vec())?;
    DiagGaussian::new(mu, lv)
}

/// Posterior `q(z_i | x) = N(μ_i, diag σ_i²)` from the promptless image feature.
pub fn posterior_params(
    frozen_feature: &Tensor,
    nets: &[MlpParams],
    layers: &[usize],
    tokens: usize,
    width: usize,
) -> Result<BTreeMap<usize, DiagGaussian>> {
    if let Some(&first) = layers.first() {
        check_coverage(layers, first, nets.len())?;
    }
    layers.iter().zip(nets).map(|(&l, net)| Ok((l, gaussian_from_net(frozen_feature, net, tokens, width)?))).collect()
}

/// Class-aware prior `p(z_i | o_y)` from a class prototype.
pub fn prior_params(
    prototype: &Tensor,
    nets: &[MlpParams],
    layers: &[usize],
    tokens: usize,
    width: usize,
) -> Result<BTreeMap<usize, DiagGaussian>> {
    posterior_params(prototype, nets, layers, tokens, width)
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparam_sample<R: Rng + ?Sized>(dist: &DiagGaussian, rng: &mut R) -> (Tensor, Tensor) {
    let eps: Vec<f64> = (0..dist.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<f64> = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .zip(&eps)
        .map(|((m, l), e)| m + libm::exp(0.5 * l) * e)
        .collect();
    let shape = dist.shape();
    (Tensor::new(shape, z).expect("finite sample"), Tensor::new(shape, eps).expect("finite noise"))
}

/// Draws every layer of a posterior with one stream.
pub fn sample_layers<R: Rng + ?Sized>(dists: &BTreeMap<usize, DiagGaussian>, rng: &mut R) -> LatentPromptSample {
    let mut out = LatentPromptSample { z: BTreeMap::new(), eps: BTreeMap::new() };
    for (&l, d) in dists {
        let (z, e) = reparam_sample(d, rng);
        out.z.insert(l, z);
        out.eps.insert(l, e);
    }
    out
}

/// Closed-form `KL(q || p)` summed over all coordinates.
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(dim_err("kl_diag_gaussians", q.shape(), p.shape()));
    }
    Ok(kl_sum(q.mu.data(), q.log_var.data(), p.mu.data(), p.log_var.data()))
}

/// Token-averaged mean and diagonal variance per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn aggregate_posterior(dists: &BTreeMap<usize, DiagGaussian>) -> Result<BTreeMap<usize, AggregatedPosterior>> {
    dists
        .iter()
        .map(|(&l, d)| {
            let (m, w) = (d.mu.rows(), d.mu.cols());
            if m == 0 || d.shape().len() != 2 {
                return Err(Error::InsufficientData { needed: 1, got: m });
            }
            let mut mean = alloc::vec![0.0; w];
            let mut var = alloc::vec![0.0; w];
            for j in 0..m {
                for k in 0..w {
                    mean[k] += d.mu.row(j)[k];
                    var[k] += libm::exp(d.log_var.row(j)[k]);
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            var.iter_mut().for_each(|v| *v /= m as f64);
            Ok((l, AggregatedPosterior { mean, var }))
        })
        .collect()
}

/// Per-layer Gaussian parameters computed for a batch on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    /// `[E·M × d]`
    pub mu: Var,
    /// `[E·M × d]`, clamped
    pub log_var: Var,
}

/// Runs a Gaussian net over `input = [E × d_vl]` and splits means from log-variances.
pub(crate) fn gaussian_on_tape(
    tape: &mut Tape,
    net: &MlpVars,
    input: Var,
    tokens: usize,
    width: usize,
) -> Result<GaussianVars> {
    let e = tape.shape(input)[0];
    let out = net.forward(tape, input)?;
    if tape.shape(out)[1] != 2 * tokens * width {
        return Err(dim_err("gaussian_on_tape", tape.shape(out), &[2 * tokens * width]));
    }
    let rows = tape.reshape(out, &[e * 2 * tokens, width])?;
    let pick = |offset: usize| -> Vec<(u32, u32)> {
        (0..e).flat_map(|i| (0..tokens).map(move |r| (0u32, (i * 2 * tokens + offset + r) as u32))).collect()
    };
    let mu = tape.gather_rows(&[rows], pick(0))?;
    let raw_lv = tape.gather_rows(&[rows], pick(tokens))?;
    let log_var = tape.clamp(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok(GaussianVars { mu, log_var })
}

/// Deterministic prompts `[E·M × d]` from a generator net on a tape.
pub(crate) fn prompts_on_tape(tape: &mut Tape, net: &MlpVars, input: Var, tokens: usize, width: usize) -> Result<Var> {
    let e = tape.shape(input)[0];
    let out = net.forward(tape, input)?;
    tape.reshape(out, &[e * tokens, width])
}
