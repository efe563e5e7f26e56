//! The experiment lifecycle as library functions; the `vamp` binary is a thin shell around them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vamp_core::ablate::{compare_novel, AblationData, AblationRow, PairedComparison};
use vamp_core::data::{generate_task, split_base_novel, DataSpec, Example, Splits, SyntheticTask};
use vamp_core::encoders::FrozenEncoderParams;
use vamp_core::gradcheck::{gradcheck_all_modes, GroupReport};
use vamp_core::infer::{harmonic_mean, EvalConfig};
use vamp_core::linalg::pca_project_2d;
use vamp_core::model::{AblationMode, CachedSet, ModelBundle, ParamGroup};
use vamp_core::train::{train as train_model, TrainOutcome};
use vamp_core::variational::aggregate_posterior;
use vamp_core::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use crate::config::{check_compatible, RunConfig};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{Result, VampError};
use crate::metrics::{write_ablation, write_train_metrics, EvalDocument, SplitRecord, EVAL_SCHEMA};
use crate::parallel;

/// Default Monte Carlo draws at evaluation time.
pub const DEFAULT_SAMPLES: usize = 10;

/// Example counts of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub base_train: usize,
    pub base_test: usize,
    pub novel_test: usize,
}

impl SplitCounts {
    pub fn of(s: &Splits) -> Self {
        Self { base_train: s.base_train.len(), base_test: s.base_test.len(), novel_test: s.novel_test.len() }
    }
}

/// Reads a bare data-spec TOML file; `None` yields the default spec.
pub fn load_spec(path: Option<&Path>) -> Result<DataSpec> {
    let spec: DataSpec = match path {
        None => DataSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| VampError::io(p, e))?;
            toml::from_str(&text).map_err(|e| VampError::ConfigFile { path: p.to_owned(), message: e.to_string() })?
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Generates the task described by `spec`, writes it to `out` and reports split sizes.
pub fn datagen(spec: &DataSpec, out: &Path) -> Result<SplitCounts> {
    let task = generate_task(spec)?;
    let splits = split_base_novel(&task, spec.shots)?;
    save_dataset(&task, out)?;
    Ok(SplitCounts::of(&splits))
}

/// A loaded dataset with its splits.
pub struct LoadedData {
    pub task: SyntheticTask,
    pub splits: Splits,
}

pub fn load_data(path: &Path) -> Result<LoadedData> {
    let task = load_dataset(path)?;
    let splits = split_base_novel(&task, task.spec.shots)?;
    Ok(LoadedData { task, splits })
}

/// The frozen encoder used with a task: a deterministic function of the task and its seed.
pub fn frozen_for(cfg: &RunConfig, task: &SyntheticTask) -> Result<FrozenEncoderParams> {
    check_compatible(&task.spec, &cfg.encoder)?;
    Ok(FrozenEncoderParams::build(&cfg.encoder, task, task.spec.seed)?)
}

pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Default metrics location next to a checkpoint.
pub fn default_metrics_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

/// Trains on the base-train split of `data` and writes a checkpoint and per-epoch metrics.
///
/// The data section of the recorded config is replaced by the dataset's own spec.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, metrics: Option<&Path>) -> Result<TrainSummary> {
    let loaded = load_data(data)?;
    let mut resolved = cfg.clone();
    resolved.data = loaded.task.spec.clone();
    resolved.validate()?;
    let frozen = frozen_for(&resolved, &loaded.task)?;
    let set = CachedSet::build(&resolved.encoder, &frozen, &loaded.splits.base_train)?;
    let mut model = ModelBundle::new(resolved.encoder.clone(), resolved.train.mode, frozen, resolved.train.seed)?;
    let outcome = train_model(&resolved.train, &set, &mut model)?;
    let ckpt = Checkpoint {
        rng: RngState { seed: resolved.train.seed, steps: outcome.steps },
        prototypes: outcome.prototypes.clone(),
        model,
        config: resolved,
    };
    save_checkpoint(&ckpt, out)?;
    let metrics_path = metrics
        .map(Path::to_owned)
        .or_else(|| ckpt.config.paths.metrics.clone())
        .unwrap_or_else(|| default_metrics_path(out));
    write_train_metrics(&metrics_path, &outcome.history, &ckpt.config.digest())?;
    Ok(TrainSummary { outcome, checkpoint: out.to_owned(), metrics: metrics_path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Base,
    Novel,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpSplit {
    Train,
    Base,
    Novel,
}

fn checkpoint_with_data(ckpt: &Path, data: &Path) -> Result<(Checkpoint, LoadedData)> {
    let ckpt = load_checkpoint(ckpt)?;
    let loaded = load_data(data)?;
    if loaded.task.spec != ckpt.config.data {
        return Err(VampError::Config(format!(
            "{} was not generated with the data spec recorded in the checkpoint",
            data.display()
        )));
    }
    Ok((ckpt, loaded))
}

/// Scores a checkpoint on the requested test split(s).
pub fn eval(
    ckpt: &Path,
    data: &Path,
    samples: usize,
    split: SplitChoice,
    seed: Option<u64>,
    threads: usize,
) -> Result<EvalDocument> {
    if samples == 0 {
        return Err(VampError::usage("--samples must be at least 1"));
    }
    let (ckpt, loaded) = checkpoint_with_data(ckpt, data)?;
    let cfg = EvalConfig {
        samples,
        seed: seed.unwrap_or(ckpt.config.train.seed),
        source: ckpt.config.train.inference_latent,
    };
    let wanted: Vec<(&str, &[Example])> = match split {
        SplitChoice::Base => vec![("base", &loaded.splits.base_test)],
        SplitChoice::Novel => vec![("novel", &loaded.splits.novel_test)],
        SplitChoice::Both => vec![("base", &loaded.splits.base_test), ("novel", &loaded.splits.novel_test)],
    };
    let model = &ckpt.model;
    let mut splits = BTreeMap::new();
    for (name, examples) in wanted {
        let set = CachedSet::build(&model.encoder, &model.frozen, examples)?;
        let report = parallel::with_threads(threads, || parallel::evaluate(model, &set, &cfg))??;
        splits.insert(name.to_string(), SplitRecord::from(&report));
    }
    let harmonic = match (splits.get("base"), splits.get("novel")) {
        (Some(b), Some(n)) => Some(harmonic_mean(b.accuracy, n.accuracy)),
        _ => None,
    };
    Ok(EvalDocument {
        schema: EVAL_SCHEMA.into(),
        mode: model.mode,
        samples,
        seed: cfg.seed,
        latent: cfg.source,
        splits,
        harmonic_mean: harmonic,
        config_sha256: ckpt.config.digest(),
        config: ckpt.config.canonical(),
    })
}

/// All parameter groups, for parsing the hidden corruption flag.
pub const PARAM_GROUPS: [ParamGroup; 5] = [
    ParamGroup::VisionPrompts,
    ParamGroup::TextPrompts,
    ParamGroup::Generators,
    ParamGroup::Posterior,
    ParamGroup::Prior,
];

pub fn parse_group(name: &str) -> Result<ParamGroup> {
    PARAM_GROUPS
        .into_iter()
        .find(|g| g.name() == name)
        .ok_or_else(|| VampError::usage(format!("unknown parameter group {name:?}")))
}

/// Finite-difference check of every trainable group in every mode.
pub fn gradcheck(cfg: &RunConfig, corrupt: Option<ParamGroup>) -> Result<Vec<GroupReport>> {
    Ok(gradcheck_all_modes(&cfg.data, &cfg.encoder, &cfg.gradcheck, corrupt)?)
}

/// The failure to report for a gradcheck, if any group failed.
pub fn gradcheck_failure(reports: &[GroupReport]) -> Option<VampError> {
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.mode, r.group)).collect();
    (!failed.is_empty()).then(|| VampError::GradcheckFailed(failed.join(", ")))
}

/// The three seed-paired comparisons along the mode ladder.
pub fn mode_ladder(rows: &[AblationRow]) -> Vec<PairedComparison> {
    use AblationMode::*;
    [
        (TaskShared, SampleDeterministic),
        (SampleDeterministic, VariationalStdPrior),
        (VariationalStdPrior, VariationalClassPrior),
    ]
    .into_iter()
    .map(|(a, b)| compare_novel(rows, a, b))
    .filter(|c| c.pairs > 0)
    .collect()
}

/// Trains every configured mode for seeds `0..seeds` on the configured task and writes the table.
pub fn ablate(cfg: &RunConfig, seeds: u64, out: &Path, threads: usize) -> Result<Vec<AblationRow>> {
    let task = generate_task(&cfg.data)?;
    let splits = split_base_novel(&task, cfg.data.shots)?;
    let frozen = frozen_for(cfg, &task)?;
    let data = AblationData::build(&cfg.encoder, &frozen, &splits)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let runs = parallel::with_threads(threads, || {
        parallel::ablate(&cfg.encoder, &frozen, &data, &cfg.train, &cfg.ablation.modes, &seeds)
    })??;
    let rows: Vec<AblationRow> = runs.iter().map(|r| r.row).collect();
    write_ablation(out, &rows, &cfg.digest())?;
    Ok(rows)
}

/// Writes per-layer aggregated posterior statistics and their 2-D PCA coordinates.
///
/// Columns: `image_id,label,layer,pc1,pc2,mean_0..,var_0..`; one row per image and layer.
pub fn dump_posterior(
    ckpt: &Path,
    data: &Path,
    layers: Option<&[usize]>,
    split: DumpSplit,
    out: &Path,
) -> Result<usize> {
    let (ckpt, loaded) = checkpoint_with_data(ckpt, data)?;
    let model = &ckpt.model;
    if !model.mode.is_variational() {
        return Err(VampError::Config(format!("{} checkpoints have no posterior", model.mode)));
    }
    let layers: Vec<usize> = layers.map_or_else(|| model.prompts.layers.clone(), <[usize]>::to_vec);
    if let Some(l) = layers.iter().find(|l| !model.prompts.layers.contains(l)) {
        return Err(VampError::usage(format!(
            "layer {l} is not prompted (prompted layers: {:?})",
            model.prompts.layers
        )));
    }
    let examples = match split {
        DumpSplit::Train => &loaded.splits.base_train,
        DumpSplit::Base => &loaded.splits.base_test,
        DumpSplit::Novel => &loaded.splits.novel_test,
    };
    let set = CachedSet::build(&model.encoder, &model.frozen, examples)?;
    let mut stats = Vec::with_capacity(set.len());
    for cache in &set.caches {
        stats.push(aggregate_posterior(&model.posterior(&cache.frozen_feature)?)?);
    }
    let width = model.encoder.text_width;
    let mut coords: BTreeMap<usize, Tensor> = BTreeMap::new();
    for &l in &layers {
        let pcs = if set.len() >= 2 {
            let rows: Vec<Vec<f64>> = stats.iter().map(|s| s[&l].mean.clone()).collect();
            pca_project_2d(&Tensor::from_rows(&rows)?)?.projection
        } else {
            Tensor::zeros(&[set.len(), 2])
        };
        coords.insert(l, pcs);
    }
    let csv_err = |source| VampError::Csv { path: out.to_owned(), source };
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    let mut header = vec!["image_id".to_string(), "label".into(), "layer".into(), "pc1".into(), "pc2".into()];
    header.extend((0..width).map(|k| format!("mean_{k}")));
    header.extend((0..width).map(|k| format!("var_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut rows = 0;
    for (i, s) in stats.iter().enumerate() {
        for &l in &layers {
            let agg = &s[&l];
            let pc = coords[&l].row(i);
            let mut rec = vec![set.ids[i].to_string(), set.labels[i].to_string(), l.to_string()];
            rec.extend(pc.iter().map(f64::to_string));
            rec.extend(agg.mean.iter().chain(&agg.var).map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| VampError::io(out, e))?;
    Ok(rows)
}
