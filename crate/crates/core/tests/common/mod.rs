#![allow(dead_code)]

use vamp_core::gradcheck::relative_error;
use vamp_core::rng::stream;
use vamp_core::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
/// Relative-error floor per unit of loss magnitude: central differences carry a
/// roundoff of about `|L|·ε/h`, so gradients far below `1e-6·|L|` are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Scalar probe `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut stream(&[seed, 0xfeed]));
    let r = tape.leaf(&r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn value<F>(inputs: &[Tensor], f: &F, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = probe(&mut tape, out, seed).unwrap();
    tape.scalar_value(loss)
}

/// Largest relative error between tape gradients and central differences over every input coordinate.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = probe(&mut tape, out, seed).unwrap();
    let floor = FLOOR * tape.scalar_value(loss).abs().max(1.0);
    tape.backward(loss).unwrap();
    let mut worst = 0.0_f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (value(&plus, &f, seed) - value(&minus, &f, seed)) / (2.0 * H);
            let e = relative_error(a, numeric, floor);
            if std::env::var("GRAD_DEBUG").is_ok() && e > 1e-5 {
                eprintln!("input {k} coord {i}: analytic {a} numeric {numeric} rel {e}");
            }
            worst = worst.max(e);
        }
    }
    worst
}

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut stream(&[seed]))
}

/// The default synthetic task, its toy frozen encoder and the cached splits.
pub struct Fixture {
    pub spec: vamp_core::data::DataSpec,
    pub encoder: vamp_core::encoders::EncoderConfig,
    pub frozen: vamp_core::encoders::FrozenEncoderParams,
    pub splits: vamp_core::data::Splits,
    pub data: vamp_core::ablate::AblationData,
}

pub fn fixture() -> Fixture {
    use vamp_core::data::{generate_task, split_base_novel, DataSpec};
    use vamp_core::encoders::{EncoderConfig, FrozenEncoderParams};
    let spec = DataSpec::default();
    let encoder = EncoderConfig::toy();
    let task = generate_task(&spec).unwrap();
    let splits = split_base_novel(&task, spec.shots).unwrap();
    let frozen = FrozenEncoderParams::build(&encoder, &task, spec.seed).unwrap();
    let data = vamp_core::ablate::AblationData::build(&encoder, &frozen, &splits).unwrap();
    Fixture { spec, encoder, frozen, splits, data }
}

/// Adds `N(0, std²)` to every trainable value so checks do not run at the special initial point.
pub fn jitter(model: &mut vamp_core::model::ModelBundle, std: f64, seed: u64) {
    use vamp_core::nn::NamedTensors;
    let mut rng = stream(&[seed, 0x5eed]);
    model.prompts.visit_mut("", &mut |_, t| {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    });
}

/// Pins every posterior log-variance to the clamp floor.
pub fn pin_posterior_variance(model: &mut vamp_core::model::ModelBundle) {
    let half = model.encoder.prompt_tokens * model.encoder.text_width;
    for net in &mut model.prompts.posterior {
        let out = net.fc2.bias.len();
        let hidden = net.fc2.weight.shape()[0];
        for r in 0..hidden {
            for c in half..out {
                net.fc2.weight.data_mut()[r * out + c] = 0.0;
            }
        }
        for c in half..out {
            net.fc2.bias.data_mut()[c] = -1e3;
        }
    }
}

/// Batch over `idx` of a cached set, with noise from a per-example stream (or zeros).
pub fn batch<'a>(
    model: &vamp_core::model::ModelBundle,
    set: &'a vamp_core::model::CachedSet,
    idx: &[usize],
    noise_seed: Option<u64>,
) -> vamp_core::objective::Batch<'a> {
    vamp_core::objective::Batch {
        images: idx.iter().map(|&i| &set.caches[i]).collect(),
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
        noise: idx
            .iter()
            .map(|&i| match noise_seed {
                Some(s) => vamp_core::objective::draw_noise(model, &mut stream(&[s, set.ids[i]])),
                None => vec![0.0; model.noise_len()],
            })
            .collect(),
    }
}
