//! Dataset files: a generated task (maps, concepts and the example pool) in the shared container.
//!
//! After the tensor directory comes the example block: `u64` count, then per example
//! `u64` id, `u32` label and a `u8` split code. Patches of all pooled examples are one
//! `[N × B × d]` tensor named `pool.patches`. Splits are recomputed on load from the
//! stored spec, so they never disagree with the pool.

use std::collections::BTreeMap;
use std::path::Path;

use vamp_core::data::{DataSpec, Example, SplitTag, SyntheticTask};
use vamp_core::Tensor;

use crate::error::{Result, VampError};
use crate::format::{header_len, tensor_entry_len, FormatError, Kind, Reader, Writer};

const MAPS: [&str; 5] = ["concepts", "patch_map", "patch_offset", "text_map", "class_embeddings"];
const POOL: &str = "pool.patches";
/// Bytes per example in the example block.
const EXAMPLE_RECORD: usize = 8 + 4 + 1;

fn spec_text(spec: &DataSpec) -> String {
    toml::to_string(spec).expect("specs always serialize")
}

fn pool_tensor(task: &SyntheticTask) -> Tensor {
    let s = &task.spec;
    let data: Vec<f64> = task.pool.iter().flat_map(|e| e.patches.data().iter().copied()).collect();
    Tensor::new(&[task.pool.len(), s.patches, s.patch_dim], data).expect("pool patches are finite")
}

fn maps(task: &SyntheticTask) -> [&Tensor; 5] {
    [&task.concepts, &task.patch_map, &task.patch_offset, &task.text_map, &task.class_embeddings]
}

pub fn encode_dataset(task: &SyntheticTask) -> Vec<u8> {
    let mut w = Writer::new(Kind::Dataset, &spec_text(&task.spec));
    let pool = pool_tensor(task);
    let entries =
        MAPS.iter().zip(maps(task)).map(|(n, t)| (n.to_string(), t)).chain(std::iter::once((POOL.to_string(), &pool)));
    w.tensors(entries.collect::<Vec<_>>().into_iter());
    w.u64(task.pool.len() as u64);
    for e in &task.pool {
        w.u64(e.id);
        w.u32(e.label as u32);
        w.u8(e.split.code());
    }
    w.finish()
}

/// Size of [`encode_dataset`]'s output computed from the layout alone.
pub fn expected_dataset_len(task: &SyntheticTask) -> usize {
    let s = &task.spec;
    let dir: usize = MAPS.iter().zip(maps(task)).map(|(n, t)| tensor_entry_len(n, t.shape())).sum::<usize>()
        + tensor_entry_len(POOL, &[task.pool.len(), s.patches, s.patch_dim]);
    header_len(spec_text(s).len()) + 4 + dir + 8 + EXAMPLE_RECORD * task.pool.len()
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<SyntheticTask, FormatError> {
    let (mut r, text) = Reader::open(bytes, Kind::Dataset)?;
    let spec: DataSpec = toml::from_str(&text).map_err(|e| FormatError::Invalid(format!("data spec: {e}")))?;
    let mut tensors: BTreeMap<String, Tensor> = r.tensors()?.into_iter().collect();
    let mut take =
        |name: &str| tensors.remove(name).ok_or_else(|| FormatError::Invalid(format!("missing tensor {name}")));
    let [concepts, patch_map, patch_offset, text_map, class_embeddings] = MAPS.map(&mut take);
    let pool = take(POOL)?;
    let n = r.len("example count")?;
    if pool.shape() != [n, spec.patches, spec.patch_dim] {
        return Err(FormatError::Invalid(format!(
            "pool patches {:?} for {n} examples of {}×{}",
            pool.shape(),
            spec.patches,
            spec.patch_dim
        )));
    }
    let per = spec.patches * spec.patch_dim;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let id = r.u64("example id")?;
        let label = r.u32("example label")? as usize;
        let code = r.u8("example split")?;
        let split = SplitTag::from_code(code).ok_or_else(|| FormatError::Invalid(format!("split code {code}")))?;
        if label >= spec.num_classes() {
            return Err(FormatError::Invalid(format!("label {label} of example {id}")));
        }
        let patches = Tensor::new(&[spec.patches, spec.patch_dim], pool.data()[i * per..(i + 1) * per].to_vec())
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        examples.push(Example { id, patches, label, split });
    }
    r.finish()?;
    Ok(SyntheticTask {
        spec,
        concepts: concepts?,
        patch_map: patch_map?,
        patch_offset: patch_offset?,
        text_map: text_map?,
        class_embeddings: class_embeddings?,
        pool: examples,
    })
}

pub fn save_dataset(task: &SyntheticTask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(task)).map_err(|e| VampError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SyntheticTask> {
    let bytes = std::fs::read(path).map_err(|e| VampError::io(path, e))?;
    decode_dataset(&bytes).map_err(|source| VampError::Format { path: path.to_owned(), source })
}
