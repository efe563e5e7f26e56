//! Checkpoint files: resolved run config, frozen and trainable tensors, RNG state, prototypes.
//!
//! After the tensor directory come the RNG block (`u64` seed, `u64` optimizer steps; all
//! randomness is derived from keyed streams, so these two values are the whole state) and
//! the prototype block (`u32` class count, `u32` width, then per class `u64` id, `u64`
//! example count and `width` f32 values). Tensors are named `frozen.*` and `prompt.*`.

use std::collections::BTreeMap;
use std::path::Path;

use vamp_core::encoders::FrozenEncoderParams;
use vamp_core::model::{ModelBundle, PromptParams};
use vamp_core::nn::NamedTensors;
use vamp_core::objective::PrototypeTable;
use vamp_core::rng::stream;
use vamp_core::Tensor;

use crate::config::RunConfig;
use crate::error::{Result, VampError};
use crate::format::{fill_named, FormatError, Kind, Reader, Writer};

const FROZEN: &str = "frozen.";
const PROMPT: &str = "prompt.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelBundle,
    pub rng: RngState,
    pub prototypes: Option<PrototypeTable>,
}

fn named(model: &ModelBundle) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.frozen.visit("", &mut |n, t| out.push((format!("{FROZEN}{n}"), t.clone())));
    model.prompts.visit("", &mut |n, t| out.push((format!("{PROMPT}{n}"), t.clone())));
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(Kind::Checkpoint, &ckpt.config.canonical());
    let tensors = named(&ckpt.model);
    w.tensors(tensors.iter().map(|(n, t)| (n.clone(), t)));
    w.u64(ckpt.rng.seed);
    w.u64(ckpt.rng.steps);
    match &ckpt.prototypes {
        None => {
            w.u32(0);
            w.u32(0);
        }
        Some(p) => {
            w.u32(p.classes.len() as u32);
            w.u32(p.prototypes.first().map_or(0, Tensor::len) as u32);
            for ((&c, t), &n) in p.classes.iter().zip(&p.prototypes).zip(&p.counts) {
                w.u64(c as u64);
                w.u64(n as u64);
                for &v in t.data() {
                    w.f32(v);
                }
            }
        }
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
    let (mut r, text) = Reader::open(bytes, Kind::Checkpoint)?;
    let config = RunConfig::from_toml(&text).map_err(|e| FormatError::Invalid(format!("embedded config: {e}")))?;
    config.validate().map_err(|e| FormatError::Invalid(format!("embedded config: {e}")))?;
    let enc = &config.encoder;
    let mut tensors: BTreeMap<String, Tensor> = r.tensors()?.into_iter().collect();

    // Skeletons with the right shapes, then overwritten tensor by tensor.
    let mut frozen =
        FrozenEncoderParams::random(enc, Tensor::zeros(&[enc.num_classes, enc.text_width]), &mut stream(&[0]));
    let mut prompts = PromptParams::init(enc, config.train.mode, 0);
    fill_named(&mut frozen, FROZEN, &mut tensors)?;
    fill_named(&mut prompts, PROMPT, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(FormatError::Invalid(format!("unexpected tensor {extra}")));
    }

    let rng = RngState { seed: r.u64("rng seed")?, steps: r.u64("rng steps")? };
    let count = r.u32("prototype count")? as usize;
    let width = r.u32("prototype width")? as usize;
    let prototypes = if count == 0 {
        None
    } else {
        if width != enc.embed_dim {
            return Err(FormatError::Invalid(format!("prototype width {width}, expected {}", enc.embed_dim)));
        }
        let mut table = PrototypeTable {
            classes: Vec::with_capacity(count),
            prototypes: Vec::with_capacity(count),
            counts: Vec::with_capacity(count),
        };
        for _ in 0..count {
            table.classes.push(r.u64("prototype class")? as usize);
            table.counts.push(r.u64("prototype count")? as usize);
            let v = (0..width).map(|_| r.f32("prototype values")).collect::<std::result::Result<Vec<_>, _>>()?;
            table.prototypes.push(Tensor::new(&[width], v).map_err(|e| FormatError::Invalid(e.to_string()))?);
        }
        Some(table)
    };
    r.finish()?;
    let model = ModelBundle { encoder: enc.clone(), mode: config.train.mode, frozen, prompts };
    Ok(Checkpoint { config, model, rng, prototypes })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| VampError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| VampError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| VampError::Format { path: path.to_owned(), source })
}

/// The model as it reads back from a checkpoint: every trainable value rounded to f32.
pub fn round_trainable(model: &mut ModelBundle) {
    model.prompts.visit_mut("", &mut |_, t| t.round_f32());
}
