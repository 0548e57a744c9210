//! The five pipeline commands behind the CLI, as library calls.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::inference::{predict_all, InferenceConfig, PredictionRecord};
use crate::metrics::{evaluate, randomize_boxes, random_baselines, BaselineMode, GtRef, MetricConfig, Report};
use crate::model::{load_checkpoint, Model, ModelConfig};
use crate::synthgen::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig, Split};
use crate::training::{init_from, train, TrainConfig, TrainSummary};
use crate::verify::{run_gradcheck, VerifyConfig, VerifyReport};

pub const RUN_META: &str = "run_meta.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

/// Everything a run needs, loaded from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricConfig,
    pub gradcheck: VerifyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.metrics.validate()?;
        let g = &self.generator;
        let m = &self.model;
        if m.input_size != g.frame_size || m.channels != g.channels {
            return Err(Error::Config(format!(
                "model expects {0}x{0}x{1} frames, generator makes {2}x{2}x{3}",
                m.input_size, m.channels, g.frame_size, g.channels
            )));
        }
        if m.vocab < g.tokens_needed() || m.num_classes < g.num_concepts {
            return Err(Error::Config(format!(
                "model vocab {} / classes {} too small for {} tokens / {} concepts",
                m.vocab,
                m.num_classes,
                g.tokens_needed(),
                g.num_concepts
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    code_version: &'a str,
    config: &'a RunConfig,
    inputs: Vec<(&'a str, String)>,
}

pub fn write_run_meta(out: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = RunMeta {
        command,
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        inputs: inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
    };
    let path = out.join(RUN_META);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Absolute form of `p`; the parent of an output directory must exist.
pub fn resolve_out(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    match abs.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => Err(Error::Config(format!(
            "parent directory {} of output does not exist",
            parent.display()
        ))),
        _ => Ok(abs),
    }
}

pub fn resolve_in(p: &Path) -> Result<PathBuf> {
    if !p.exists() {
        return Err(Error::Config(format!("{} does not exist", p.display())));
    }
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.generator.validate()?;
    let out = resolve_out(out)?;
    let ds = generate_dataset(&cfg.generator, cfg.seed)?;
    write_dataset(&ds, &out)?;
    write_run_meta(&out, "gen", cfg, &[])?;
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, init: Option<&Path>) -> Result<(Model, TrainSummary)> {
    cfg.validate()?;
    let data = resolve_in(data)?;
    let out = resolve_out(out)?;
    let init = init.map(resolve_in).transpose()?;
    let ds = read_dataset(&data)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Some(ck) = &init {
        init_from(&mut model, ck)?;
    }
    let mut inputs = vec![("data", data.as_path())];
    if let Some(ck) = &init {
        inputs.push(("init_from", ck.as_path()));
    }
    write_run_meta(&out, "train", cfg, &inputs)?;
    let summary = train(&mut model, &ds, &cfg.train, Some(&out))?;
    Ok((model, summary))
}

/// Ground-truth references of one split.
pub fn split_gts(ds: &Dataset, split: Split) -> Vec<GtRef<'_>> {
    ds.split(split)
        .flat_map(|e| e.annotations.iter().map(move |a| GtRef { ann: a, video_len: e.video.len() }))
        .collect()
}

/// Runs inference for every annotation of `split` whose task is in `tasks`.
pub fn infer_split(
    model: &Model,
    ds: &Dataset,
    split: Split,
    tasks: &[Task],
    cfg: &InferenceConfig,
) -> Result<Vec<PredictionRecord>> {
    let items: Vec<_> = ds
        .split(split)
        .flat_map(|e| {
            e.annotations
                .iter()
                .filter(|a| tasks.contains(&a.task))
                .map(move |a| (&e.video, a))
        })
        .collect();
    predict_all(model, &items, cfg)
}

pub fn write_predictions(path: &Path, recs: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in recs {
        out.extend(serde_json::to_vec(r)?);
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: Split,
) -> Result<Vec<PredictionRecord>> {
    cfg.inference.validate()?;
    let checkpoint = resolve_in(checkpoint)?;
    let data = resolve_in(data)?;
    let out = resolve_out(out)?;
    let model = load_checkpoint(&checkpoint)?;
    let ds = read_dataset(&data)?;
    let recs = infer_split(&model, &ds, split, &Task::ALL, &cfg.inference)?;
    write_run_meta(&out, "infer", cfg, &[("checkpoint", &checkpoint), ("data", &data)])?;
    write_predictions(&out.join(PREDICTIONS), &recs)?;
    Ok(recs)
}

/// What `eval` scores.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Predictions(PathBuf),
    /// Random segments and boxes over `repeats` seeds.
    Baseline { mode: BaselineMode, repeats: usize },
    /// Given predictions with every box replaced by a random one.
    BoxBaseline { predictions: PathBuf, mode: BaselineMode, repeats: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub mean: Report,
    /// One report per seed for the baselines.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<Report>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

pub fn cmd_eval(cfg: &RunConfig, source: &EvalSource, data: &Path, out: &Path, split: Split) -> Result<EvalOutput> {
    cfg.metrics.validate()?;
    let data = resolve_in(data)?;
    let out = resolve_out(out)?;
    let ds = read_dataset(&data)?;
    let gts = split_gts(&ds, split);
    let result = match source {
        EvalSource::Predictions(p) => {
            let recs = read_predictions(&resolve_in(p)?)?;
            EvalOutput {
                mean: evaluate(&recs, &gts, &cfg.metrics)?,
                per_seed: Vec::new(),
                seeds: Vec::new(),
            }
        }
        EvalSource::Baseline { mode, repeats } => {
            let b = random_baselines(&gts, *mode, cfg.seed, *repeats, &cfg.metrics)?;
            EvalOutput {
                mean: b.mean,
                per_seed: b.per_seed,
                seeds: b.seeds,
            }
        }
        EvalSource::BoxBaseline {
            predictions,
            mode,
            repeats,
        } => {
            let recs = read_predictions(&resolve_in(predictions)?)?;
            let seeds: Vec<u64> = (0..(*repeats).max(1) as u64).map(|i| cfg.seed + i).collect();
            let per_seed = seeds
                .iter()
                .map(|&s| evaluate(&randomize_boxes(&recs, *mode, s), &gts, &cfg.metrics))
                .collect::<Result<Vec<_>>>()?;
            EvalOutput {
                mean: Report::mean(&per_seed),
                per_seed,
                seeds,
            }
        }
    };
    write_run_meta(&out, "eval", cfg, &[("data", &data)])?;
    let path = out.join(REPORT_JSON);
    fs::write(&path, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    let path = out.join(REPORT_TXT);
    fs::write(&path, result.mean.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<VerifyReport> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    if let Some(out) = out {
        let out = resolve_out(out)?;
        write_run_meta(&out, "gradcheck", cfg, &[])?;
        let path = out.join(GRADCHECK_JSON);
        fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
