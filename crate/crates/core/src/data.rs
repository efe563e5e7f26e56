//! Synthetic few-shot benchmark with base and novel classes.
//!
//! Each class owns a latent concept vector. Images are patch grids produced
//! by a fixed affine map of the concept plus Gaussian noise; the frozen text
//! table embeds each class through a separate random projection of the same
//! concept, so text and vision share latent structure.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

const MAX_CONCEPT_ATTEMPTS: usize = 10_000;

/// Generator parameters for a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub c_base: usize,
    pub c_novel: usize,
    pub d_concept: usize,
    pub noise_scale: f64,
    /// Patches per image.
    pub patches: usize,
    /// Width of each raw patch feature.
    pub patch_dim: usize,
    /// Width of the class-embedding tokens handed to the text encoder.
    pub text_dim: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub pool_per_class: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            c_base: 6,
            c_novel: 4,
            d_concept: 8,
            noise_scale: 0.3,
            patches: 4,
            patch_dim: 16,
            text_dim: 32,
            shots: 16,
            test_per_class: 24,
            pool_per_class: 40,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        self.c_base + self.c_novel
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_base < 2 {
            return Err(Error::InfeasibleSpec(format!("c_base = {} (need >= 2)", self.c_base)));
        }
        if self.c_novel < 1 {
            return Err(Error::InfeasibleSpec("c_novel must be >= 1".into()));
        }
        if self.d_concept == 0 || self.patches == 0 || self.patch_dim == 0 || self.text_dim == 0 {
            return Err(Error::InfeasibleSpec("dimensions must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InfeasibleSpec("noise_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Pool,
    BaseTrain,
    BaseTest,
    NovelTest,
}

impl SplitTag {
    pub fn code(self) -> u8 {
        match self {
            SplitTag::Pool => 0,
            SplitTag::BaseTrain => 1,
            SplitTag::BaseTest => 2,
            SplitTag::NovelTest => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => SplitTag::Pool,
            1 => SplitTag::BaseTrain,
            2 => SplitTag::BaseTest,
            3 => SplitTag::NovelTest,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    /// `[patches × patch_dim]`
    pub patches: Tensor,
    pub label: usize,
    pub split: SplitTag,
}

/// Generated world: concepts, the maps that render them, and the example pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: DataSpec,
    /// `[C × d_concept]`; rows `0..c_base` are base classes.
    pub concepts: Tensor,
    /// `[patches·patch_dim × d_concept]`
    pub patch_map: Tensor,
    /// `[patches·patch_dim]`
    pub patch_offset: Tensor,
    /// `[text_dim × d_concept]`
    pub text_map: Tensor,
    /// `[C × text_dim]`, initialization of the frozen class-embedding table.
    pub class_embeddings: Tensor,
    pub pool: Vec<Example>,
}

/// The three evaluation-protocol splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub base_train: Vec<Example>,
    pub base_test: Vec<Example>,
    pub novel_test: Vec<Example>,
}

impl Splits {
    pub fn iter_all(&self) -> impl Iterator<Item = &Example> {
        self.base_train.iter().chain(&self.base_test).chain(&self.novel_test)
    }
}

impl SyntheticTask {
    pub fn is_base(&self, class: usize) -> bool {
        class < self.spec.c_base
    }

    /// Renders one noisy image of an arbitrary concept.
    pub fn render<R: Rng + ?Sized>(&self, concept: &[f64], rng: &mut R) -> Tensor {
        let s = &self.spec;
        let n = s.patches * s.patch_dim;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.patch_map.row(i);
            let clean: f64 = row.iter().zip(concept).map(|(a, u)| a * u).sum::<f64>() + self.patch_offset.data()[i];
            let noise: f64 = rng.sample(StandardNormal);
            data.push(clean + s.noise_scale * noise);
        }
        Tensor::new(&[s.patches, s.patch_dim], data).expect("finite patches")
    }

    /// Class-embedding token for an arbitrary concept.
    pub fn embed_concept(&self, concept: &[f64]) -> Vec<f64> {
        (0..self.spec.text_dim).map(|i| self.text_map.row(i).iter().zip(concept).map(|(a, u)| a * u).sum()).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Samples concepts, rendering maps and a per-class example pool.
pub fn generate_task(spec: &DataSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let c = spec.num_classes();
    let dc = spec.d_concept;
    let map_std = 1.0 / libm::sqrt(dc as f64);

    let mut world = stream(&[spec.seed, purpose::TASK, u64::MAX]);
    let mut patch_map = Tensor::randn(&[spec.patches * spec.patch_dim, dc], map_std, &mut world);
    let mut patch_offset = Tensor::randn(&[spec.patches * spec.patch_dim], 0.5, &mut world);
    let mut text_map = Tensor::randn(&[spec.text_dim, dc], map_std, &mut world);
    // Every stored value is rounded to f32 precision so 32-bit dataset files are lossless.
    patch_map.round_f32();
    patch_offset.round_f32();
    text_map.round_f32();

    let min_sep = 2.0 * spec.noise_scale;
    let mut concepts: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0usize;
    let mut rng = stream(&[spec.seed, purpose::TASK, 0]);
    while concepts.len() < c {
        attempts += 1;
        if attempts > MAX_CONCEPT_ATTEMPTS {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {c} concepts {min_sep} apart in {MAX_CONCEPT_ATTEMPTS} attempts"
            )));
        }
        let u: Vec<f64> = (0..dc).map(|_| rng.sample(StandardNormal)).collect();
        if concepts.iter().all(|v| sq_dist(v, &u) >= min_sep * min_sep) {
            concepts.push(u);
        }
    }
    let mut concepts = Tensor::from_rows(&concepts)?;
    concepts.round_f32();

    let mut task = SyntheticTask {
        spec: spec.clone(),
        concepts,
        patch_map,
        patch_offset,
        text_map,
        class_embeddings: Tensor::zeros(&[c, spec.text_dim]),
        pool: Vec::with_capacity(c * spec.pool_per_class),
    };
    let emb: Vec<Vec<f64>> = (0..c).map(|k| task.embed_concept(task.concepts.row(k))).collect();
    task.class_embeddings = Tensor::from_rows(&emb)?;
    task.class_embeddings.round_f32();

    for class in 0..c {
        let mut rng = stream(&[spec.seed, purpose::TASK, 1 + class as u64]);
        let concept = task.concepts.row(class).to_vec();
        for j in 0..spec.pool_per_class {
            let mut patches = task.render(&concept, &mut rng);
            patches.round_f32();
            task.pool.push(Example {
                id: (class * spec.pool_per_class + j) as u64,
                patches,
                label: class,
                split: SplitTag::Pool,
            });
        }
    }
    Ok(task)
}

/// Partitions the pool into base-train (`shots` per base class), base-test and novel-test.
pub fn split_base_novel(task: &SyntheticTask, shots: usize) -> Result<Splits> {
    let s = &task.spec;
    let mut splits = Splits { base_train: Vec::new(), base_test: Vec::new(), novel_test: Vec::new() };
    for class in 0..s.num_classes() {
        let mut members: Vec<&Example> = task.pool.iter().filter(|e| e.label == class).collect();
        let needed = if task.is_base(class) { shots + s.test_per_class } else { s.test_per_class };
        if members.len() < needed {
            return Err(Error::InsufficientPool { class, available: members.len(), requested: needed });
        }
        let mut rng = stream(&[s.seed, purpose::SPLIT, class as u64]);
        members.shuffle(&mut rng);
        let tagged = |e: &Example, tag| Example { split: tag, ..e.clone() };
        if task.is_base(class) {
            splits.base_train.extend(members[..shots].iter().map(|e| tagged(e, SplitTag::BaseTrain)));
            splits.base_test.extend(members[shots..needed].iter().map(|e| tagged(e, SplitTag::BaseTest)));
        } else {
            splits.novel_test.extend(members[..needed].iter().map(|e| tagged(e, SplitTag::NovelTest)));
        }
    }
    Ok(splits)
}

/// Nearest class-mean classifier on raw patches; returns base-test accuracy.
pub fn nearest_centroid_accuracy(train: &[Example], test: &[Example]) -> f64 {
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for e in train {
        if sums.len() <= e.label {
            sums.resize(e.label + 1, (Vec::new(), 0));
        }
        let (acc, n) = &mut sums[e.label];
        if acc.is_empty() {
            *acc = alloc::vec![0.0; e.patches.len()];
        }
        acc.iter_mut().zip(e.patches.data()).for_each(|(a, v)| *a += v);
        *n += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> =
        sums.into_iter().map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect())).collect();
    let correct = test
        .iter()
        .filter(|e| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(k, c)| c.as_ref().map(|c| (k, sq_dist(c, e.patches.data()))))
                .fold((usize::MAX, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
            best.0 == e.label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
