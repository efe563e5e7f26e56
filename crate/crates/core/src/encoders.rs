//! Frozen miniature dual encoder with deep prompt injection.
//!
//! Both towers are stacks of pre-norm transformer blocks. For every prompted
//! layer `i` in `[J, J+H)`, fresh prompt tokens join the layer input (text
//! prompts are prepended, vision prompts appended) and the rows they produce
//! are dropped again, so prompt outputs never carry over into the next layer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticTask;
use crate::error::{dim_err, Error, Result};
use crate::linalg::solve_spd;
use crate::nn::{attention_block, BlockParams, Linear, NamedTensors};
use crate::rng::{purpose, stream};
use crate::tape::{RowRef, Tape, Var};
use crate::tensor::Tensor;

/// Shape of both towers and of the prompting scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Transformer layers per tower (K).
    pub layers: usize,
    pub vision_width: usize,
    pub text_width: usize,
    /// Joint embedding width.
    pub embed_dim: usize,
    /// Patches per image (B).
    pub patches: usize,
    /// Raw patch feature width.
    pub patch_dim: usize,
    /// Text tokens per class prompt (N): N-1 template tokens and the class token.
    pub text_tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// First prompted layer (J).
    pub prompt_start: usize,
    /// Number of prompted layers (H).
    pub prompt_depth: usize,
    /// Prompt tokens per layer (M).
    pub prompt_tokens: usize,
    pub temperature: f64,
    /// Rows of the class-embedding table (base and novel classes).
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            layers: 6,
            vision_width: 32,
            text_width: 32,
            embed_dim: 16,
            patches: 4,
            patch_dim: 16,
            text_tokens: 4,
            heads: 4,
            mlp_ratio: 4,
            prompt_start: 3,
            prompt_depth: 3,
            prompt_tokens: 4,
            temperature: 0.07,
            num_classes: 10,
        }
    }

    /// Twelve layers prompted from layer 5 through the last, five tokens each.
    pub fn deep() -> Self {
        Self { layers: 12, prompt_start: 5, prompt_depth: 7, prompt_tokens: 5, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.prompt_start + self.prompt_depth > self.layers {
            return fail(format!(
                "prompted layers [{}, {}) exceed layer count {}",
                self.prompt_start,
                self.prompt_start + self.prompt_depth,
                self.layers
            ));
        }
        if self.heads == 0
            || !self.vision_width.is_multiple_of(self.heads)
            || !self.text_width.is_multiple_of(self.heads)
        {
            return fail(format!("widths must be divisible by {} heads", self.heads));
        }
        if self.text_tokens == 0 || self.patches == 0 || self.patch_dim == 0 || self.embed_dim == 0 {
            return fail("token counts and widths must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn prompted_layers(&self) -> core::ops::Range<usize> {
        self.prompt_start..self.prompt_start + self.prompt_depth
    }

    pub fn is_prompting(&self) -> bool {
        self.prompt_depth > 0 && self.prompt_tokens > 0
    }

    /// First layer whose input can differ from the promptless pass.
    pub fn cache_layer(&self) -> usize {
        if self.is_prompting() {
            self.prompt_start
        } else {
            self.layers
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTower {
    pub patch_embed: Linear,
    /// `[1 × d_v]`
    pub class_token: Tensor,
    /// `[(1+B) × d_v]`
    pub positional: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_post_gamma: Tensor,
    pub ln_post_beta: Tensor,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    /// `[(N-1) × d_l]`
    pub template: Tensor,
    /// `[C × d_l]`
    pub class_embeddings: Tensor,
    /// `[N × d_l]`
    pub positional: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_final_gamma: Tensor,
    pub ln_final_beta: Tensor,
    pub head: Linear,
}

/// Frozen weights of both towers. Never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderParams {
    pub vision: VisionTower,
    pub text: TextTower,
}

impl NamedTensors for VisionTower {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Tensor)) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), f);
        f(format!("{prefix}.class_token"), &self.class_token);
        f(format!("{prefix}.positional"), &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        f(format!("{prefix}.ln_post.gamma"), &self.ln_post_gamma);
        f(format!("{prefix}.ln_post.beta"), &self.ln_post_beta);
        self.head.visit(&format!("{prefix}.head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Tensor)) {
        self.patch_embed.visit_mut(&format!("{prefix}.patch_embed"), f);
        f(format!("{prefix}.class_token"), &mut self.class_token);
        f(format!("{prefix}.positional"), &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        f(format!("{prefix}.ln_post.gamma"), &mut self.ln_post_gamma);
        f(format!("{prefix}.ln_post.beta"), &mut self.ln_post_beta);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

impl NamedTensors for TextTower {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Tensor)) {
        f(format!("{prefix}.template"), &self.template);
        f(format!("{prefix}.class_embeddings"), &self.class_embeddings);
        f(format!("{prefix}.positional"), &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        f(format!("{prefix}.ln_final.gamma"), &self.ln_final_gamma);
        f(format!("{prefix}.ln_final.beta"), &self.ln_final_beta);
        self.head.visit(&format!("{prefix}.head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Tensor)) {
        f(format!("{prefix}.template"), &mut self.template);
        f(format!("{prefix}.class_embeddings"), &mut self.class_embeddings);
        f(format!("{prefix}.positional"), &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        f(format!("{prefix}.ln_final.gamma"), &mut self.ln_final_gamma);
        f(format!("{prefix}.ln_final.beta"), &mut self.ln_final_beta);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

impl NamedTensors for FrozenEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Tensor)) {
        self.vision.visit(&format!("{prefix}vision"), f);
        self.text.visit(&format!("{prefix}text"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Tensor)) {
        self.vision.visit_mut(&format!("{prefix}vision"), f);
        self.text.visit_mut(&format!("{prefix}text"), f);
    }
}

/// Number of random concepts used to align the projection heads.
const HEAD_FIT_POOL: usize = 512;
const HEAD_FIT_RIDGE: f64 = 1e-2;

impl FrozenEncoderParams {
    /// Random towers with heads fitted so both modalities land in a shared space.
    ///
    /// Transformer weights are random; the class-embedding table comes from
    /// the task. The two projection heads are then fitted by ridge regression
    /// on freshly drawn concepts (never the task's own classes) so that image
    /// and text features of the same concept map to the same target vector.
    ///
    /// Every value is rounded to `f32` precision, so the frozen encoders
    /// survive 32-bit checkpoint storage exactly.
    pub fn build(cfg: &EncoderConfig, task: &SyntheticTask, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let s = &task.spec;
        if s.patches != cfg.patches || s.patch_dim != cfg.patch_dim || s.text_dim != cfg.text_width {
            return Err(Error::Config(format!(
                "task geometry (B={}, patch_dim={}, text_dim={}) does not match encoder (B={}, patch_dim={}, d_l={})",
                s.patches, s.patch_dim, s.text_dim, cfg.patches, cfg.patch_dim, cfg.text_width
            )));
        }
        if task.class_embeddings.rows() != cfg.num_classes {
            return Err(Error::Config(format!(
                "task has {} classes, encoder expects {}",
                task.class_embeddings.rows(),
                cfg.num_classes
            )));
        }
        let mut rng = stream(&[seed, purpose::FROZEN_INIT]);
        let mut params = Self::random(cfg, task.class_embeddings.clone(), &mut rng);
        params.fit_heads(cfg, task, seed)?;
        params.visit_mut("", &mut |_, t| t.round_f32());
        Ok(params)
    }

    /// Random towers with unfitted (random) projection heads.
    pub fn random<R: Rng + ?Sized>(cfg: &EncoderConfig, class_embeddings: Tensor, rng: &mut R) -> Self {
        let (dv, dl) = (cfg.vision_width, cfg.text_width);
        let vision = VisionTower {
            patch_embed: {
                let mut l = Linear::init(cfg.patch_dim, dv, 1.0 / libm::sqrt(cfg.patch_dim as f64), rng);
                l.bias = Tensor::randn(&[dv], 0.02, rng);
                l
            },
            class_token: Tensor::randn(&[1, dv], 1.0, rng),
            positional: Tensor::randn(&[1 + cfg.patches, dv], 0.1, rng),
            blocks: (0..cfg.layers).map(|_| BlockParams::init(dv, cfg.mlp_ratio, rng)).collect(),
            ln_post_gamma: Tensor::filled(&[dv], 1.0),
            ln_post_beta: Tensor::zeros(&[dv]),
            head: Linear::init(dv, cfg.embed_dim, 1.0 / libm::sqrt(dv as f64), rng),
        };
        let text = TextTower {
            template: Tensor::randn(&[cfg.text_tokens - 1, dl], 1.0, rng),
            class_embeddings,
            positional: Tensor::randn(&[cfg.text_tokens, dl], 0.1, rng),
            blocks: (0..cfg.layers).map(|_| BlockParams::init(dl, cfg.mlp_ratio, rng)).collect(),
            ln_final_gamma: Tensor::filled(&[dl], 1.0),
            ln_final_beta: Tensor::zeros(&[dl]),
            head: Linear::init(dl, cfg.embed_dim, 1.0 / libm::sqrt(dl as f64), rng),
        };
        Self { vision, text }
    }

    fn fit_heads(&mut self, cfg: &EncoderConfig, task: &SyntheticTask, seed: u64) -> Result<()> {
        let dc = task.spec.d_concept;
        let mut rng = stream(&[seed, purpose::HEAD_FIT]);
        let target_map = Tensor::randn(&[dc, cfg.embed_dim], 1.0 / libm::sqrt(dc as f64), &mut rng);
        let concepts = Tensor::randn(&[HEAD_FIT_POOL, dc], 1.0, &mut rng);
        let mut targets = Vec::with_capacity(HEAD_FIT_POOL * cfg.embed_dim);
        let mut images = Vec::with_capacity(HEAD_FIT_POOL);
        let mut tokens = Vec::with_capacity(HEAD_FIT_POOL);
        for i in 0..HEAD_FIT_POOL {
            let u = concepts.row(i);
            for j in 0..cfg.embed_dim {
                targets.push((0..dc).map(|k| u[k] * target_map.data()[k * cfg.embed_dim + j]).sum::<f64>());
            }
            images.push(task.render(u, &mut rng));
            tokens.push(task.embed_concept(u));
        }

        let vision_feats = {
            let mut tape = Tape::new();
            let x = vision_embed(&mut tape, cfg, &self.vision, &images)?;
            let x = run_layers(
                &mut tape,
                cfg,
                &self.vision.blocks,
                x,
                0,
                1 + cfg.patches,
                &NoPrompts,
                PromptSide::Append,
                None,
            )?;
            let cls = select_rows(&mut tape, x, images.len(), 1 + cfg.patches, |_| 0..1)?;
            let v = tape.layer_norm_const(cls, &self.vision.ln_post_gamma, &self.vision.ln_post_beta)?;
            tape.tensor(v)
        };
        let text_feats = {
            let mut tape = Tape::new();
            let table = Tensor::from_rows(&tokens)?;
            let x = text_embed_tokens(&mut tape, cfg, &self.text, &table, &(0..HEAD_FIT_POOL).collect::<Vec<_>>())?;
            let n = cfg.text_tokens;
            let x = run_layers(&mut tape, cfg, &self.text.blocks, x, 0, n, &NoPrompts, PromptSide::Prepend, None)?;
            let last = select_rows(&mut tape, x, HEAD_FIT_POOL, n, |_| n - 1..n)?;
            let v = tape.layer_norm_const(last, &self.text.ln_final_gamma, &self.text.ln_final_beta)?;
            tape.tensor(v)
        };
        self.vision.head = ridge_affine(&vision_feats, &targets, cfg.embed_dim)?;
        self.text.head = ridge_affine(&text_feats, &targets, cfg.embed_dim)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and exact bit patterns of every frozen tensor.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        h.finalize().into()
    }
}

/// Least-squares affine map `x ↦ xW + b` from `feats` rows to `targets` rows.
fn ridge_affine(feats: &Tensor, targets: &[f64], out: usize) -> Result<Linear> {
    let (n, d) = (feats.rows(), feats.cols());
    let mut mean_x = vec![0.0; d];
    let mut mean_y = vec![0.0; out];
    for i in 0..n {
        mean_x.iter_mut().zip(feats.row(i)).for_each(|(m, v)| *m += v / n as f64);
        mean_y.iter_mut().zip(&targets[i * out..(i + 1) * out]).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d * out];
    for i in 0..n {
        let x: Vec<f64> = feats.row(i).iter().zip(&mean_x).map(|(a, m)| a - m).collect();
        let y: Vec<f64> = targets[i * out..(i + 1) * out].iter().zip(&mean_y).map(|(a, m)| a - m).collect();
        for a in 0..d {
            for b in 0..d {
                xtx[a * d + b] += x[a] * x[b];
            }
            for b in 0..out {
                xty[a * out + b] += x[a] * y[b];
            }
        }
    }
    for a in 0..d {
        xtx[a * d + a] += HEAD_FIT_RIDGE * n as f64;
    }
    let w = solve_spd(&xtx, &xty, d, out)?;
    let bias: Vec<f64> =
        (0..out).map(|j| mean_y[j] - (0..d).map(|a| mean_x[a] * w[a * out + j]).sum::<f64>()).collect();
    Ok(Linear { weight: Tensor::new(&[d, out], w)?, bias: Tensor::new(&[out], bias)? })
}

impl Tape {
    pub(crate) fn layer_norm_const(&mut self, x: Var, gamma: &Tensor, beta: &Tensor) -> Result<Var> {
        let g = self.leaf(gamma);
        let b = self.leaf(beta);
        self.layer_norm(x, g, b)
    }
}

/// Where prompt tokens sit relative to a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSide {
    /// `[z, w]` (text).
    Prepend,
    /// `[c, e, z]` (vision).
    Append,
}

/// Prompt rows for one layer: sequence `s` uses rows `offsets[s] .. offsets[s] + count` of `var`.
#[derive(Debug, Clone)]
pub struct PromptRows {
    pub var: Var,
    pub offsets: Vec<u32>,
    pub count: usize,
}

impl PromptRows {
    /// The same prompt rows for all `nseq` sequences.
    pub fn shared(var: Var, count: usize, nseq: usize) -> Self {
        Self { var, offsets: vec![0; nseq], count }
    }
}

/// Supplies prompt rows per layer index.
pub trait LayerPrompts {
    fn at(&self, layer: usize) -> Option<&PromptRows>;
}

pub struct NoPrompts;

impl LayerPrompts for NoPrompts {
    fn at(&self, _: usize) -> Option<&PromptRows> {
        None
    }
}

impl LayerPrompts for BTreeMap<usize, PromptRows> {
    fn at(&self, layer: usize) -> Option<&PromptRows> {
        self.get(&layer)
    }
}

/// Rows `range(s)` of every length-`seq_len` sequence in `x`, stacked.
pub(crate) fn select_rows<F>(tape: &mut Tape, x: Var, nseq: usize, seq_len: usize, range: F) -> Result<Var>
where
    F: Fn(usize) -> core::ops::Range<usize>,
{
    let mut index = Vec::new();
    for s in 0..nseq {
        index.extend(range(s).map(|r| (0u32, (s * seq_len + r) as u32)));
    }
    tape.gather_rows(&[x], index)
}

/// Runs blocks `start..K` over `nseq` sequences of length `seq_len`.
///
/// `trace`, when given, receives the stacked activations entering `start`
/// and the output of every subsequent layer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layers(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    blocks: &[BlockParams],
    mut x: Var,
    start: usize,
    seq_len: usize,
    prompts: &dyn LayerPrompts,
    side: PromptSide,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(dim_err("run_layers", tape.shape(x), &[seq_len]));
    }
    let nseq = rows / seq_len;
    let width = tape.shape(x)[1];
    if let Some(t) = trace.as_deref_mut() {
        t.push(x);
    }
    for (layer, block) in blocks.iter().enumerate().skip(start) {
        let vars = block.register(tape, false);
        let prompt = prompts.at(layer).filter(|p| p.count > 0);
        x = match prompt {
            None => attention_block(tape, x, &vars, cfg.heads, seq_len)?.0,
            Some(p) => {
                let pw = tape.shape(p.var)[1];
                if pw != width {
                    return Err(dim_err("prompt width", &[pw], &[width]));
                }
                if p.offsets.len() != nseq {
                    return Err(dim_err("prompt offsets", &[p.offsets.len()], &[nseq]));
                }
                let m = p.count;
                let mut index: Vec<RowRef> = Vec::with_capacity(nseq * (seq_len + m));
                for (s, &off) in p.offsets.iter().enumerate() {
                    let seq = (0..seq_len).map(|r| (0u32, (s * seq_len + r) as u32));
                    let pr = (0..m).map(|r| (1u32, off + r as u32));
                    match side {
                        PromptSide::Prepend => index.extend(pr.chain(seq)),
                        PromptSide::Append => index.extend(seq.chain(pr)),
                    }
                }
                let joined = tape.gather_rows(&[x, p.var], index)?;
                let (out, _) = attention_block(tape, joined, &vars, cfg.heads, seq_len + m)?;
                match side {
                    PromptSide::Prepend => select_rows(tape, out, nseq, seq_len + m, |_| m..m + seq_len)?,
                    PromptSide::Append => select_rows(tape, out, nseq, seq_len + m, |_| 0..seq_len)?,
                }
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(x);
        }
    }
    Ok(x)
}

/// Embedded layer-0 input for a batch of images: `[E·(1+B) × d_v]`.
pub(crate) fn vision_embed(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    tower: &VisionTower,
    images: &[Tensor],
) -> Result<Var> {
    let mut data = Vec::with_capacity(images.len() * cfg.patches * cfg.patch_dim);
    for img in images {
        if img.shape() != [cfg.patches, cfg.patch_dim] {
            return Err(dim_err("encode_image patches", img.shape(), &[cfg.patches, cfg.patch_dim]));
        }
        data.extend_from_slice(img.data());
    }
    let e = images.len();
    let raw = tape.constant(&[e * cfg.patches, cfg.patch_dim], data)?;
    let pe = tower.patch_embed.register(tape, false);
    let emb = pe.forward(tape, raw)?;
    let cls = tape.leaf(&tower.class_token);
    let seq = 1 + cfg.patches;
    let mut index = Vec::with_capacity(e * seq);
    for i in 0..e {
        index.push((0u32, 0u32));
        index.extend((0..cfg.patches).map(|b| (1u32, (i * cfg.patches + b) as u32)));
    }
    let tokens = tape.gather_rows(&[cls, emb], index)?;
    let pos = tape.leaf(&tower.positional);
    let pos = tape.gather_rows(&[pos], (0..e).flat_map(|_| (0..seq as u32).map(|r| (0u32, r))).collect())?;
    tape.add(tokens, pos)
}

/// Embedded layer-0 input for class prompts: `[S·N × d_l]`, rows of `table` as class tokens.
pub(crate) fn text_embed_tokens(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    tower: &TextTower,
    table: &Tensor,
    classes: &[usize],
) -> Result<Var> {
    let n = cfg.text_tokens;
    let tmpl = tape.leaf(&tower.template);
    let tab = tape.leaf(table);
    let mut index = Vec::with_capacity(classes.len() * n);
    for &c in classes {
        if c >= table.rows() {
            return Err(Error::UnknownClass { id: c, count: table.rows() });
        }
        index.extend((0..n - 1).map(|r| (0u32, r as u32)));
        index.push((1u32, c as u32));
    }
    let tokens = tape.gather_rows(&[tmpl, tab], index)?;
    let pos = tape.leaf(&tower.positional);
    let pos = tape.gather_rows(&[pos], classes.iter().flat_map(|_| (0..n as u32).map(|r| (0u32, r))).collect())?;
    tape.add(tokens, pos)
}

/// Final class-token features `[E × d_vl]` from layer-`start` activations.
pub(crate) fn vision_readout(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    tower: &VisionTower,
    x: Var,
    start: usize,
    prompts: &dyn LayerPrompts,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let seq = 1 + cfg.patches;
    let nseq = tape.shape(x)[0] / seq;
    let x = run_layers(tape, cfg, &tower.blocks, x, start, seq, prompts, PromptSide::Append, trace)?;
    let cls = select_rows(tape, x, nseq, seq, |_| 0..1)?;
    let h = tape.layer_norm_const(cls, &tower.ln_post_gamma, &tower.ln_post_beta)?;
    tower.head.register(tape, false).forward(tape, h)
}

/// Final last-token features `[S × d_vl]` from layer-`start` activations.
pub(crate) fn text_readout(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    tower: &TextTower,
    x: Var,
    start: usize,
    prompts: &dyn LayerPrompts,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let n = cfg.text_tokens;
    let nseq = tape.shape(x)[0] / n;
    let x = run_layers(tape, cfg, &tower.blocks, x, start, n, prompts, PromptSide::Prepend, trace)?;
    let last = select_rows(tape, x, nseq, n, |_| n - 1..n)?;
    let h = tape.layer_norm_const(last, &tower.ln_final_gamma, &tower.ln_final_beta)?;
    tower.head.register(tape, false).forward(tape, h)
}

/// Layer-indexed prompt tensors for both towers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptStack {
    /// layer → `[M × d_l]`
    pub text: BTreeMap<usize, Tensor>,
    /// layer → `[M × d_v]`
    pub vision: BTreeMap<usize, Tensor>,
}

impl PromptStack {
    /// Checks that each populated side covers exactly the prompted layers.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        for (side, map, width) in [("text", &self.text, cfg.text_width), ("vision", &self.vision, cfg.vision_width)] {
            if map.is_empty() {
                continue;
            }
            if !map.keys().copied().eq(cfg.prompted_layers()) {
                return Err(Error::Config(format!(
                    "{side} prompts cover layers {:?}, expected {:?}",
                    map.keys().collect::<Vec<_>>(),
                    cfg.prompted_layers()
                )));
            }
            for t in map.values() {
                if t.shape().len() != 2 || t.cols() != width || t.rows() != cfg.prompt_tokens {
                    return Err(dim_err("prompt", t.shape(), &[cfg.prompt_tokens, width]));
                }
            }
        }
        Ok(())
    }

    fn register(map: &BTreeMap<usize, Tensor>, tape: &mut Tape, nseq: usize) -> BTreeMap<usize, PromptRows> {
        map.iter()
            .map(|(&layer, t)| {
                let var = tape.leaf(t);
                (layer, PromptRows::shared(var, t.rows(), nseq))
            })
            .collect()
    }
}

fn check_prompt_widths(cfg: &EncoderConfig, map: &BTreeMap<usize, Tensor>, width: usize) -> Result<()> {
    for t in map.values() {
        if t.cols() != width {
            return Err(dim_err("prompt width", t.shape(), &[cfg.prompt_tokens, width]));
        }
    }
    Ok(())
}

/// Image feature `f_x` (`[d_vl]`) with optional vision prompts.
pub fn encode_image(
    cfg: &EncoderConfig,
    params: &FrozenEncoderParams,
    patches: &Tensor,
    prompts: Option<&PromptStack>,
) -> Result<Tensor> {
    Ok(encode_image_trace(cfg, params, patches, prompts)?.0)
}

/// `encode_image` plus the activation stack entering each layer and leaving the last.
pub fn encode_image_trace(
    cfg: &EncoderConfig,
    params: &FrozenEncoderParams,
    patches: &Tensor,
    prompts: Option<&PromptStack>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = vision_embed(&mut tape, cfg, &params.vision, core::slice::from_ref(patches))?;
    let rows = match prompts {
        Some(p) => {
            check_prompt_widths(cfg, &p.vision, cfg.vision_width)?;
            PromptStack::register(&p.vision, &mut tape, 1)
        }
        None => BTreeMap::new(),
    };
    let mut trace = Vec::new();
    let f = vision_readout(&mut tape, cfg, &params.vision, x, 0, &rows, Some(&mut trace))?;
    let feats = tape.tensor(f).reshape(&[cfg.embed_dim])?;
    Ok((feats, trace.into_iter().map(|v| tape.tensor(v)).collect()))
}

/// Text feature `t` (`[d_vl]`) for one class with optional text prompts.
pub fn encode_text(
    cfg: &EncoderConfig,
    params: &FrozenEncoderParams,
    class_id: usize,
    prompts: Option<&PromptStack>,
) -> Result<Tensor> {
    Ok(encode_text_trace(cfg, params, class_id, prompts)?.0)
}

pub fn encode_text_trace(
    cfg: &EncoderConfig,
    params: &FrozenEncoderParams,
    class_id: usize,
    prompts: Option<&PromptStack>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = text_embed_tokens(&mut tape, cfg, &params.text, &params.text.class_embeddings, &[class_id])?;
    let rows = match prompts {
        Some(p) => {
            check_prompt_widths(cfg, &p.text, cfg.text_width)?;
            PromptStack::register(&p.text, &mut tape, 1)
        }
        None => BTreeMap::new(),
    };
    let mut trace = Vec::new();
    let t = text_readout(&mut tape, cfg, &params.text, x, 0, &rows, Some(&mut trace))?;
    let feats = tape.tensor(t).reshape(&[cfg.embed_dim])?;
    Ok((feats, trace.into_iter().map(|v| tape.tensor(v)).collect()))
}

/// Scaled cosine logits, class probabilities and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub prediction: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `logits[c] = cos(f_x, t_c) / tau`.
pub fn classify_logits(f_x: &Tensor, texts: &Tensor, tau: f64) -> Result<Classification> {
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if texts.cols() != f_x.len() {
        return Err(dim_err("classify_logits", f_x.shape(), texts.shape()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(&[1, f_x.len()], f_x.data().to_vec())?;
    let t = tape.constant(&[texts.rows(), texts.cols()], texts.data().to_vec())?;
    let logits = cosine_logits(&mut tape, f, t, texts.rows(), tau)?;
    let probs = tape.softmax_rows(logits)?;
    let probs = tape.value(probs).to_vec();
    Ok(Classification { logits: tape.value(logits).to_vec(), prediction: argmax(&probs), probs })
}

/// Logits `[E × C]` where image `e` is scored against text rows `e·C .. (e+1)·C`.
///
/// `texts` may also hold just `C` rows shared by every image.
pub(crate) fn cosine_logits(tape: &mut Tape, images: Var, texts: Var, classes: usize, tau: f64) -> Result<Var> {
    let e = tape.shape(images)[0];
    let trows = tape.shape(texts)[0];
    if trows != classes && trows != e * classes {
        return Err(dim_err("cosine_logits", tape.shape(images), tape.shape(texts)));
    }
    let fi = tape.l2_normalize_rows(images)?;
    let ti = tape.l2_normalize_rows(texts)?;
    let fexp = tape.gather_rows(&[fi], (0..e).flat_map(|i| (0..classes).map(move |_| (0u32, i as u32))).collect())?;
    let texp = if trows == classes && e > 1 {
        tape.gather_rows(&[ti], (0..e).flat_map(|_| (0..classes as u32).map(|c| (0u32, c))).collect())?
    } else {
        ti
    };
    let prod = tape.mul(fexp, texp)?;
    let sims = tape.sum_rows(prod)?;
    let sims = tape.reshape(sims, &[e, classes])?;
    tape.scale(sims, 1.0 / tau)
}

/// Cached promptless activations for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCache {
    /// Activations entering the first prompted layer, `[(1+B) × d_v]`.
    pub entry: Tensor,
    /// Promptless image feature (the frozen embedding used to condition prompts).
    pub frozen_feature: Tensor,
}

/// Runs the promptless vision tower once, keeping what prompted passes reuse.
pub fn precompute_images(
    cfg: &EncoderConfig,
    params: &FrozenEncoderParams,
    images: &[Tensor],
) -> Result<Vec<ImageCache>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let x = vision_embed(&mut tape, cfg, &params.vision, images)?;
    let mut trace = Vec::new();
    let f = vision_readout(&mut tape, cfg, &params.vision, x, 0, &NoPrompts, Some(&mut trace))?;
    let entry = tape.tensor(trace[cfg.cache_layer()]);
    let feats = tape.tensor(f);
    let seq = 1 + cfg.patches;
    let (dv, dvl) = (cfg.vision_width, cfg.embed_dim);
    Ok((0..images.len())
        .map(|i| ImageCache {
            entry: Tensor::new(&[seq, dv], entry.data()[i * seq * dv..(i + 1) * seq * dv].to_vec()).expect("finite"),
            frozen_feature: Tensor::new(&[dvl], feats.row(i).to_vec()).expect("finite"),
        })
        .collect())
}

/// Promptless text activations entering the first prompted layer, `[N × d_l]` per class.
pub fn precompute_text(cfg: &EncoderConfig, params: &FrozenEncoderParams, classes: &[usize]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = text_embed_tokens(&mut tape, cfg, &params.text, &params.text.class_embeddings, classes)?;
    let mut trace = Vec::new();
    text_readout(&mut tape, cfg, &params.text, x, 0, &NoPrompts, Some(&mut trace))?;
    let entry = tape.tensor(trace[cfg.cache_layer()]);
    let (n, dl) = (cfg.text_tokens, cfg.text_width);
    Ok((0..classes.len())
        .map(|i| Tensor::new(&[n, dl], entry.data()[i * n * dl..(i + 1) * n * dl].to_vec()).expect("finite"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, DataSpec};

    fn toy() -> (EncoderConfig, FrozenEncoderParams) {
        let cfg = EncoderConfig::toy();
        let task = generate_task(&DataSpec::default()).unwrap();
        let params = FrozenEncoderParams::build(&cfg, &task, 1).unwrap();
        (cfg, params)
    }

    #[test]
    fn config_constraints() {
        let mut c = EncoderConfig::toy();
        c.prompt_start = 4;
        c.prompt_depth = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::deep().validate().is_ok());
    }

    #[test]
    fn classify_logits_examples() {
        let f = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let texts = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let c = classify_logits(&f, &texts, 1.0).unwrap();
        assert_eq!(c.logits, vec![1.0, 0.0]);
        let e = core::f64::consts::E;
        assert!((c.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((c.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(c.prediction, 0);

        let f5 = Tensor::new(&[2], vec![5.0, 0.0]).unwrap();
        let c5 = classify_logits(&f5, &texts, 1.0).unwrap();
        for (a, b) in c.logits.iter().zip(&c5.logits) {
            assert!((a - b).abs() <= 1e-12);
        }
        let zero = Tensor::zeros(&[2]);
        assert_eq!(classify_logits(&zero, &texts, 1.0).unwrap_err(), Error::ZeroNorm("l2_normalize_rows"));
        assert!(classify_logits(&f, &texts, 0.0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn prompt_width_mismatch_is_a_dimension_error() {
        let (cfg, params) = toy();
        let mut p = PromptStack::default();
        for l in cfg.prompted_layers() {
            p.vision.insert(l, Tensor::zeros(&[cfg.prompt_tokens, cfg.vision_width + 1]));
        }
        let img = Tensor::zeros(&[cfg.patches, cfg.patch_dim]);
        assert!(matches!(encode_image(&cfg, &params, &img, Some(&p)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unknown_class_is_a_lookup_error() {
        let (cfg, params) = toy();
        assert_eq!(encode_text(&cfg, &params, 99, None).unwrap_err(), Error::UnknownClass { id: 99, count: 10 });
    }

    #[test]
    fn distinct_classes_give_distinct_text_features() {
        let (cfg, params) = toy();
        let a = encode_text(&cfg, &params, 0, None).unwrap();
        let b = encode_text(&cfg, &params, 1, None).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn cached_entry_reproduces_full_pass() {
        let (cfg, params) = toy();
        let task = generate_task(&DataSpec::default()).unwrap();
        let imgs: Vec<Tensor> = task.pool[..3].iter().map(|e| e.patches.clone()).collect();
        let caches = precompute_images(&cfg, &params, &imgs).unwrap();
        for (img, cache) in imgs.iter().zip(&caches) {
            let (f, trace) = encode_image_trace(&cfg, &params, img, None).unwrap();
            assert_eq!(f, cache.frozen_feature);
            assert_eq!(trace[cfg.cache_layer()], cache.entry);
        }
    }
}
