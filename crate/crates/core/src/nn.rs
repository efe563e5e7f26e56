//! Affine layers, two-layer MLPs and pre-norm transformer blocks on the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Visitor over named parameter tensors.
pub trait NamedTensors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self { weight: Tensor::randn(&[input, output], std, rng), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.leaf(t) };
        LinearVars { weight: reg(tape, &self.weight), bias: reg(tape, &self.bias) }
    }
}

impl NamedTensors for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row_bias(h, self.bias)
    }
}

/// Two affine layers with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { fc1: Linear::zeros(input, hidden), fc2: Linear::zeros(hidden, output) }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self { fc1: Linear::init(input, hidden, std, rng), fc2: Linear::init(hidden, output, std, rng) }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars { fc1: self.fc1.register(tape, trainable), fc2: self.fc2.register(tape, trainable) }
    }
}

impl NamedTensors for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Pre-norm transformer layer: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub out: LinearVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp: MlpVars,
}

impl BlockParams {
    /// Random block with `1/sqrt(fan_in)` scaled weights and small random biases.
    pub fn init<R: Rng + ?Sized>(width: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = width * mlp_ratio;
        let std_in = 1.0 / libm::sqrt(width as f64);
        let std_hidden = 1.0 / libm::sqrt(hidden as f64);
        let lin = |i: usize, o: usize, std: f64, rng: &mut R| {
            let mut l = Linear::init(i, o, std, rng);
            l.bias = Tensor::randn(&[o], 0.02, rng);
            l
        };
        let query = lin(width, width, std_in, rng);
        let key = lin(width, width, std_in, rng);
        let value = lin(width, width, std_in, rng);
        let out = lin(width, width, std_in, rng);
        let fc1 = lin(width, hidden, std_in, rng);
        let fc2 = lin(hidden, width, std_hidden, rng);
        let ln = |rng: &mut R| {
            let g: Tensor = Tensor::randn(&[width], 0.05, rng);
            let g = Tensor::new(&[width], g.data().iter().map(|v| 1.0 + v).collect()).expect("finite");
            (g, Tensor::randn(&[width], 0.02, rng))
        };
        let (ln1_gamma, ln1_beta) = ln(rng);
        let (ln2_gamma, ln2_beta) = ln(rng);
        Self { ln1_gamma, ln1_beta, query, key, value, out, ln2_gamma, ln2_beta, mlp: MlpParams { fc1, fc2 } }
    }

    pub fn width(&self) -> usize {
        self.query.input_dim()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.leaf(t) };
        BlockVars {
            ln1_gamma: reg(tape, &self.ln1_gamma),
            ln1_beta: reg(tape, &self.ln1_beta),
            query: self.query.register(tape, trainable),
            key: self.key.register(tape, trainable),
            value: self.value.register(tape, trainable),
            out: self.out.register(tape, trainable),
            ln2_gamma: reg(tape, &self.ln2_gamma),
            ln2_beta: reg(tape, &self.ln2_beta),
            mlp: self.mlp.register(tape, trainable),
        }
    }
}

impl NamedTensors for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "ln1.gamma"), &self.ln1_gamma);
        f(join(prefix, "ln1.beta"), &self.ln1_beta);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        f(join(prefix, "ln2.gamma"), &self.ln2_gamma);
        f(join(prefix, "ln2.beta"), &self.ln2_beta);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "ln1.gamma"), &mut self.ln1_gamma);
        f(join(prefix, "ln1.beta"), &mut self.ln1_beta);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        f(join(prefix, "ln2.gamma"), &mut self.ln2_gamma);
        f(join(prefix, "ln2.beta"), &mut self.ln2_beta);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Runs one pre-norm block over `x = [nseq·seq_len × d]`.
///
/// Returns the block output and the attention node (for inspecting weights).
pub fn attention_block(tape: &mut Tape, x: Var, p: &BlockVars, heads: usize, seq_len: usize) -> Result<(Var, Var)> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let q = p.query.forward(tape, h)?;
    let k = p.key.forward(tape, h)?;
    let v = p.value.forward(tape, h)?;
    let attn = tape.attention(q, k, v, heads, seq_len)?;
    let o = p.out.forward(tape, attn)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta)?;
    let m = p.mlp.forward(tape, h)?;
    Ok((tape.add(x, m)?, attn))
}

/// Collects `(name, tensor)` pairs in visiting order.
pub fn collect_named<T: NamedTensors + ?Sized>(t: &T, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    t.visit(prefix, &mut |n, v| out.push((n, v.clone())));
    out
}
