//! Trainable prompt parameters and the batched prompted forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::{
    cosine_logits, precompute_text, text_readout, vision_readout, EncoderConfig, FrozenEncoderParams, ImageCache,
    PromptRows,
};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, MlpVars, NamedTensors};
use crate::rng::{purpose, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{gaussian_on_tape, prompts_on_tape, GaussianVars};

/// Std of the Gaussian initialization for prompts and prompt networks.
pub const INIT_STD: f64 = 0.02;

/// Which prompting scheme is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    /// Text and vision prompts are free parameters shared by all inputs.
    TaskShared,
    /// Text prompts generated from the image feature by per-layer MLPs.
    SampleDeterministic,
    /// Gaussian text prompts, ELBO with a standard normal prior.
    VariationalStdPrior,
    /// Gaussian text prompts, ELBO with a prototype-conditioned prior.
    VariationalClassPrior,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::TaskShared,
        AblationMode::SampleDeterministic,
        AblationMode::VariationalStdPrior,
        AblationMode::VariationalClassPrior,
    ];

    pub fn is_variational(self) -> bool {
        matches!(self, AblationMode::VariationalStdPrior | AblationMode::VariationalClassPrior)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::TaskShared => "TASK_SHARED",
            AblationMode::SampleDeterministic => "SAMPLE_DETERMINISTIC",
            AblationMode::VariationalStdPrior => "VARIATIONAL_STD_PRIOR",
            AblationMode::VariationalClassPrior => "VARIATIONAL_CLASS_PRIOR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named group a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    VisionPrompts,
    TextPrompts,
    Generators,
    Posterior,
    Prior,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Some(match head {
            "vision_prompt" => ParamGroup::VisionPrompts,
            "text_prompt" => ParamGroup::TextPrompts,
            "generator" => ParamGroup::Generators,
            "posterior" => ParamGroup::Posterior,
            "prior" => ParamGroup::Prior,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VisionPrompts => "vision_prompts",
            ParamGroup::TextPrompts => "text_prompts",
            ParamGroup::Generators => "generators",
            ParamGroup::Posterior => "posterior",
            ParamGroup::Prior => "prior",
        }
    }
}

/// Every trainable tensor. Groups not used by the mode are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    pub layers: Vec<usize>,
    /// `[M × d_v]` per prompted layer.
    pub vision: Vec<Tensor>,
    /// `[M × d_l]` per prompted layer (task-shared mode).
    pub text: Vec<Tensor>,
    pub generators: Vec<MlpParams>,
    pub posterior: Vec<MlpParams>,
    pub prior: Vec<MlpParams>,
}

impl PromptParams {
    pub fn init(cfg: &EncoderConfig, mode: AblationMode, seed: u64) -> Self {
        let mut rng = stream(&[seed, purpose::PROMPT_INIT]);
        let layers: Vec<usize> = if cfg.is_prompting() { cfg.prompted_layers().collect() } else { Vec::new() };
        let (m, dv, dl, dvl) = (cfg.prompt_tokens, cfg.vision_width, cfg.text_width, cfg.embed_dim);
        let mut p = Self {
            layers: layers.clone(),
            vision: layers.iter().map(|_| Tensor::randn(&[m, dv], INIT_STD, &mut rng)).collect(),
            text: Vec::new(),
            generators: Vec::new(),
            posterior: Vec::new(),
            prior: Vec::new(),
        };
        let mlps = |out: usize, rng: &mut _| -> Vec<MlpParams> {
            layers.iter().map(|_| MlpParams::init(dvl, dvl, out, INIT_STD, rng)).collect()
        };
        match mode {
            AblationMode::TaskShared => {
                p.text = layers.iter().map(|_| Tensor::randn(&[m, dl], INIT_STD, &mut rng)).collect();
            }
            AblationMode::SampleDeterministic => p.generators = mlps(m * dl, &mut rng),
            AblationMode::VariationalStdPrior => p.posterior = mlps(2 * m * dl, &mut rng),
            AblationMode::VariationalClassPrior => {
                p.posterior = mlps(2 * m * dl, &mut rng);
                p.prior = mlps(2 * m * dl, &mut rng);
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name));
        out
    }

    /// Registers every tensor as a trainable leaf, in visiting order.
    pub fn register(&self, tape: &mut Tape) -> TrainableVars {
        let first = tape.len();
        let vision = self.vision.iter().map(|t| tape.param(t)).collect();
        let text = self.text.iter().map(|t| tape.param(t)).collect();
        let generators = self.generators.iter().map(|n| n.register(tape, true)).collect();
        let posterior = self.posterior.iter().map(|n| n.register(tape, true)).collect();
        let prior = self.prior.iter().map(|n| n.register(tape, true)).collect();
        let all: Vec<Var> = (first..tape.len()).map(var_at).collect();
        debug_assert_eq!(all.len(), self.names().len());
        TrainableVars { vision, text, generators, posterior, prior, all }
    }
}

fn var_at(i: usize) -> Var {
    // Trainable leaves are recorded consecutively; rebuild their handles by index.
    crate::tape::var_from_index(i)
}

impl NamedTensors for PromptParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, t) in self.layers.iter().zip(&self.vision) {
            f(format!("{prefix}vision_prompt.{l}"), t);
        }
        for (l, t) in self.layers.iter().zip(&self.text) {
            f(format!("{prefix}text_prompt.{l}"), t);
        }
        for (l, n) in self.layers.iter().zip(&self.generators) {
            n.visit(&format!("{prefix}generator.{l}"), f);
        }
        for (l, n) in self.layers.iter().zip(&self.posterior) {
            n.visit(&format!("{prefix}posterior.{l}"), f);
        }
        for (l, n) in self.layers.iter().zip(&self.prior) {
            n.visit(&format!("{prefix}prior.{l}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, t) in self.layers.iter().zip(&mut self.vision) {
            f(format!("{prefix}vision_prompt.{l}"), t);
        }
        for (l, t) in self.layers.iter().zip(&mut self.text) {
            f(format!("{prefix}text_prompt.{l}"), t);
        }
        for (l, n) in self.layers.iter().zip(&mut self.generators) {
            n.visit_mut(&format!("{prefix}generator.{l}"), f);
        }
        for (l, n) in self.layers.iter().zip(&mut self.posterior) {
            n.visit_mut(&format!("{prefix}posterior.{l}"), f);
        }
        for (l, n) in self.layers.iter().zip(&mut self.prior) {
            n.visit_mut(&format!("{prefix}prior.{l}"), f);
        }
    }
}

/// Tape handles of the trainable tensors.
#[derive(Debug, Clone)]
pub struct TrainableVars {
    pub vision: Vec<Var>,
    pub text: Vec<Var>,
    pub generators: Vec<MlpVars>,
    pub posterior: Vec<MlpVars>,
    pub prior: Vec<MlpVars>,
    /// All leaves in [`PromptParams`] visiting order.
    pub all: Vec<Var>,
}

/// Frozen encoders, trainable prompt parameters and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderConfig,
    pub mode: AblationMode,
    pub frozen: FrozenEncoderParams,
    pub prompts: PromptParams,
}

/// Where the text-side latents come from in a variational forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// `z = μ + σ ⊙ ε` from the image-conditioned posterior.
    Posterior,
    /// `z = ε`, the standard normal prior.
    StandardPrior,
}

/// Precomputed promptless text activations for a list of candidate classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCache {
    pub classes: Vec<usize>,
    pub entries: Vec<Tensor>,
}

impl TextCache {
    pub fn build(model: &ModelBundle, classes: &[usize]) -> Result<Self> {
        Ok(Self { classes: classes.to_vec(), entries: precompute_text(&model.encoder, &model.frozen, classes)? })
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Output of [`ModelBundle::forward_batch`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[E·draws × C]`, row `e·draws + s` is draw `s` of image `e`.
    pub logits: Var,
    /// Posterior parameters per prompted layer over `E` images (variational modes).
    pub posterior: Vec<GaussianVars>,
    /// Promptless image features `[E × d_vl]`.
    pub frozen_features: Var,
}

impl ModelBundle {
    pub fn new(encoder: EncoderConfig, mode: AblationMode, frozen: FrozenEncoderParams, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let prompts = PromptParams::init(&encoder, mode, seed);
        Ok(Self { encoder, mode, frozen, prompts })
    }

    /// Noise values needed per image and draw: `H · M · d_l`.
    pub fn noise_len(&self) -> usize {
        if self.mode.is_variational() {
            self.prompts.layers.len() * self.encoder.prompt_tokens * self.encoder.text_width
        } else {
            0
        }
    }

    /// Prompted forward pass over `images`, `draws` latent draws each.
    ///
    /// `noise[e·draws + s]` supplies the `H·M·d_l` standard normal values of
    /// draw `s` for image `e` (ignored outside variational modes; empty slices
    /// mean zero noise).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &TrainableVars,
        text: &TextCache,
        images: &[&ImageCache],
        draws: usize,
        noise: &[Vec<f64>],
        source: LatentSource,
    ) -> Result<Forward> {
        let cfg = &self.encoder;
        let e = images.len();
        if e == 0 {
            return Err(Error::EmptySplit);
        }
        let draws = if self.mode.is_variational() { draws.max(1) } else { 1 };
        let v = e * draws;
        let c = text.classes.len();
        let (m, dl) = (cfg.prompt_tokens, cfg.text_width);
        let start = cfg.cache_layer();

        let fbar_data: Vec<f64> = images.iter().flat_map(|i| i.frozen_feature.data().iter().copied()).collect();
        let fbar = tape.constant(&[e, cfg.embed_dim], fbar_data)?;

        // Vision tower with shared prompts.
        let seq_v = 1 + cfg.patches;
        let entry: Vec<f64> = images.iter().flat_map(|i| i.entry.data().iter().copied()).collect();
        let xv = tape.constant(&[e * seq_v, cfg.vision_width], entry)?;
        let vprompts: alloc::collections::BTreeMap<usize, PromptRows> =
            self.prompts.layers.iter().zip(&vars.vision).map(|(&l, &var)| (l, PromptRows::shared(var, m, e))).collect();
        let fx = vision_readout(tape, cfg, &self.frozen.vision, xv, start, &vprompts, None)?;

        // Text prompts per layer, one block of M rows per virtual example.
        let mut posterior = Vec::new();
        let shared_text = self.mode == AblationMode::TaskShared;
        let text_examples = if shared_text { 1 } else { v };
        let mut tprompts = alloc::collections::BTreeMap::new();
        for (k, &layer) in self.prompts.layers.iter().enumerate() {
            let (var, per_example): (Var, bool) = match self.mode {
                AblationMode::TaskShared => (vars.text[k], false),
                AblationMode::SampleDeterministic => (prompts_on_tape(tape, &vars.generators[k], fbar, m, dl)?, true),
                AblationMode::VariationalStdPrior | AblationMode::VariationalClassPrior => {
                    let g = gaussian_on_tape(tape, &vars.posterior[k], fbar, m, dl)?;
                    posterior.push(g);
                    let mut eps = Vec::with_capacity(v * m * dl);
                    for n in 0..v {
                        let src = noise.get(n).map(Vec::as_slice).unwrap_or(&[]);
                        if src.is_empty() {
                            eps.extend(core::iter::repeat_n(0.0, m * dl));
                        } else if src.len() != self.noise_len() {
                            return Err(crate::error::dim_err("noise", &[src.len()], &[self.noise_len()]));
                        } else {
                            eps.extend_from_slice(&src[k * m * dl..(k + 1) * m * dl]);
                        }
                    }
                    let z = match source {
                        LatentSource::StandardPrior => tape.constant(&[v * m, dl], eps)?,
                        LatentSource::Posterior => {
                            let (mu, lv) = if draws == 1 {
                                (g.mu, g.log_var)
                            } else {
                                let rep: Vec<(u32, u32)> = (0..e)
                                    .flat_map(|i| {
                                        (0..draws).flat_map(move |_| (0..m).map(move |r| (0u32, (i * m + r) as u32)))
                                    })
                                    .collect();
                                (tape.gather_rows(&[g.mu], rep.clone())?, tape.gather_rows(&[g.log_var], rep)?)
                            };
                            tape.reparam(mu, lv, eps)?
                        }
                    };
                    (z, true)
                }
            };
            let offsets: Vec<u32> = (0..text_examples)
                .flat_map(|n| {
                    let off = if per_example { (n * m) as u32 } else { 0 };
                    core::iter::repeat_n(off, c)
                })
                .collect();
            tprompts.insert(layer, PromptRows { var, offsets, count: m });
        }
        let n = cfg.text_tokens;
        let mut tdata = Vec::with_capacity(text_examples * c * n * dl);
        for _ in 0..text_examples {
            for entry in &text.entries {
                tdata.extend_from_slice(entry.data());
            }
        }
        let xt = tape.constant(&[text_examples * c * n, dl], tdata)?;
        let tfeat = text_readout(tape, cfg, &self.frozen.text, xt, start, &tprompts, None)?;

        let fv = if draws > 1 {
            let rep = (0..e).flat_map(|i| (0..draws).map(move |_| (0u32, i as u32))).collect();
            tape.gather_rows(&[fx], rep)?
        } else {
            fx
        };
        let logits = cosine_logits(tape, fv, tfeat, c, cfg.temperature)?;
        Ok(Forward { logits, posterior, frozen_features: fbar })
    }
}

/// Cached promptless activations for a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedSet {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub caches: Vec<ImageCache>,
}

impl CachedSet {
    pub fn build(cfg: &EncoderConfig, frozen: &FrozenEncoderParams, examples: &[crate::data::Example]) -> Result<Self> {
        let mut caches = Vec::with_capacity(examples.len());
        // Bounded tapes keep memory flat for large splits.
        for chunk in examples.chunks(64) {
            let imgs: Vec<Tensor> = chunk.iter().map(|e| e.patches.clone()).collect();
            caches.extend(crate::encoders::precompute_images(cfg, frozen, &imgs)?);
        }
        Ok(Self {
            ids: examples.iter().map(|e| e.id).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            caches,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, DataSpec};
    use crate::encoders::precompute_images;
    use alloc::vec;

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.name()), Some(m));
        }
        assert_eq!(AblationMode::parse("nope"), None);
    }

    #[test]
    fn trainable_sets_differ_per_mode() {
        let cfg = EncoderConfig::toy();
        let groups = |mode| {
            let p = PromptParams::init(&cfg, mode, 0);
            let mut g: Vec<ParamGroup> = p.names().iter().filter_map(|n| ParamGroup::of(n)).collect();
            g.dedup();
            g
        };
        use ParamGroup::*;
        assert_eq!(groups(AblationMode::TaskShared), vec![VisionPrompts, TextPrompts]);
        assert_eq!(groups(AblationMode::SampleDeterministic), vec![VisionPrompts, Generators]);
        assert_eq!(groups(AblationMode::VariationalStdPrior), vec![VisionPrompts, Posterior]);
        assert_eq!(groups(AblationMode::VariationalClassPrior), vec![VisionPrompts, Posterior, Prior]);
    }

    #[test]
    fn batched_forward_matches_single_examples() {
        let spec = DataSpec::default();
        let task = generate_task(&spec).unwrap();
        let cfg = EncoderConfig::toy();
        let frozen = FrozenEncoderParams::build(&cfg, &task, 0).unwrap();
        let model = ModelBundle::new(cfg.clone(), AblationMode::SampleDeterministic, frozen, 3).unwrap();
        let imgs: Vec<Tensor> = task.pool[..3].iter().map(|e| e.patches.clone()).collect();
        let caches = precompute_images(&cfg, &model.frozen, &imgs).unwrap();
        let text = TextCache::build(&model, &[0, 1, 2]).unwrap();
        let run = |refs: &[&ImageCache]| {
            let mut tape = Tape::new();
            let vars = model.prompts.register(&mut tape);
            let f = model.forward_batch(&mut tape, &vars, &text, refs, 1, &[], LatentSource::Posterior).unwrap();
            tape.value(f.logits).to_vec()
        };
        let all = run(&caches.iter().collect::<Vec<_>>());
        for (i, c) in caches.iter().enumerate() {
            assert_eq!(run(&[c]), all[i * 3..(i + 1) * 3].to_vec());
        }
    }
}
