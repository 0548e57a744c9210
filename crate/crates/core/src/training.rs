//! Training: window sampling around ground truth, multi-task batch
//! scheduling, AdamW with per-group learning rates, and the epoch loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, BoxCxCyWh, Segment, Task, TaskMap, VideoTensor};
use crate::error::{Error, Result};
use crate::losses::{task_loss, LossBreakdown, LossWeights, WindowTargets};
use crate::model::{forward, load_checkpoint, save_checkpoint, Model, ParamGroup};
use crate::synthgen::{Dataset, Split};
use crate::tensors::{Array, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    RoundRobin,
    Concat,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_robin" | "round-robin" => Ok(Self::RoundRobin),
            "concat" => Ok(Self::Concat),
            o => Err(Error::Config(format!("unknown sampling mode `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_text: f64,
    pub lr_rest: f64,
    pub lr_drop_every: usize,
    /// Multiplier applied every `lr_drop_every` epochs.
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub sampling: Sampling,
    /// Temporal subsampling stride applied to each task's videos.
    pub strides: TaskMap<usize>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_backbone: 1e-3,
            lr_text: 1e-3,
            lr_rest: 1e-3,
            lr_drop_every: 10,
            lr_drop_factor: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: Some(1.0),
            seed: 0,
            tasks: Task::ALL.to_vec(),
            sampling: Sampling::RoundRobin,
            strides: TaskMap {
                vq2d: 1,
                nlq: 2,
                mq: 2,
            },
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_text: 1e-5,
            lr_rest: 1e-4,
            strides: TaskMap {
                vq2d: 1,
                nlq: 5,
                mq: 5,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if [self.lr_backbone, self.lr_text, self.lr_rest]
            .iter()
            .any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return fail("learning rates must be > 0");
        }
        if self.tasks.is_empty() {
            return fail("task list is empty");
        }
        if self.batch_size == 0 || self.lr_drop_every == 0 {
            return fail("batch_size and lr_drop_every must be >= 1");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail("lr_drop_factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("invalid Adam hyper-parameters");
        }
        if self.weight_decay < 0.0 || self.max_grad_norm.is_some_and(|g| g <= 0.0) {
            return fail("weight_decay must be >= 0 and max_grad_norm > 0");
        }
        if Task::ALL.iter().any(|&t| self.strides.get(t) == 0) {
            return fail("strides must be >= 1");
        }
        self.loss.validate()
    }

    pub fn base_lr(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Text => self.lr_text,
            ParamGroup::Rest => self.lr_rest,
        }
    }

    /// Step-decayed learning rate of group `g` during `epoch`.
    pub fn lr(&self, g: ParamGroup, epoch: usize) -> f64 {
        self.base_lr(g) * self.lr_drop_factor.powi((epoch / self.lr_drop_every) as i32)
    }
}

/// Start of a `w`-frame training window and the index of the GT segment it
/// was placed around. Segments no longer than `w` end up fully inside;
/// longer ones overlap the window by at least one frame.
pub fn sample_training_window(
    segments: &[Segment],
    w: usize,
    t: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if w == 0 || w > t {
        return Err(Error::Config(format!("window of {w} frames on a {t}-frame video")));
    }
    if segments.is_empty() {
        return Err(Error::Contract("no ground-truth segment to sample around".into()));
    }
    let k = rng.random_range(0..segments.len());
    let [s, e] = segments[k];
    if e >= t || s > e {
        return Err(Error::Contract(format!("segment [{s}, {e}] outside {t} frames")));
    }
    let (lo, hi) = if e - s < w {
        ((e + 1).saturating_sub(w), s.min(t - w))
    } else {
        ((s + 1).saturating_sub(w), e.min(t - w))
    };
    Ok((rng.random_range(lo..=hi), k))
}

/// One pure-task batch of item indices into that task's sample list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: Task,
    pub items: Vec<usize>,
}

/// Endless batch iterator over per-task sample lists.
///
/// Round-robin cycles the tasks in order, each drawing from its own
/// reshuffling permutation. Concat chunks every task's shuffled list into
/// batches and shuffles the union of batches once per pass.
#[derive(Clone, Debug)]
pub struct BatchStream {
    mode: Sampling,
    batch_size: usize,
    tasks: Vec<(Task, usize)>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next: usize,
    pool: Vec<Batch>,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(sizes: &[(Task, usize)], mode: Sampling, batch_size: usize, seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("no tasks to sample from".into()));
        }
        if let Some((t, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("no {t} training samples")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self {
            mode,
            batch_size,
            tasks: sizes.to_vec(),
            orders: vec![Vec::new(); sizes.len()],
            cursors: vec![0; sizes.len()],
            next: 0,
            pool: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Batches in one pass over every sample once.
    pub fn batches_per_epoch(&self) -> usize {
        self.tasks.iter().map(|(_, n)| n.div_ceil(self.batch_size)).sum()
    }

    fn draw(&mut self, ti: usize) -> usize {
        if self.cursors[ti] == self.orders[ti].len() {
            let mut o: Vec<usize> = (0..self.tasks[ti].1).collect();
            o.shuffle(&mut self.rng);
            self.orders[ti] = o;
            self.cursors[ti] = 0;
        }
        self.cursors[ti] += 1;
        self.orders[ti][self.cursors[ti] - 1]
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match self.mode {
            Sampling::RoundRobin => {
                let ti = self.next;
                self.next = (self.next + 1) % self.tasks.len();
                let items = (0..self.batch_size.min(self.tasks[ti].1)).map(|_| self.draw(ti)).collect();
                Some(Batch {
                    task: self.tasks[ti].0,
                    items,
                })
            }
            Sampling::Concat => {
                if self.pool.is_empty() {
                    for (task, n) in self.tasks.clone() {
                        let mut o: Vec<usize> = (0..n).collect();
                        o.shuffle(&mut self.rng);
                        for c in o.chunks(self.batch_size) {
                            self.pool.push(Batch {
                                task,
                                items: c.to_vec(),
                            });
                        }
                    }
                    self.pool.shuffle(&mut self.rng);
                    self.pool.reverse();
                }
                self.pool.pop()
            }
        }
    }
}

/// A training annotation: `(episode, annotation)` indices into a dataset.
pub type SampleRef = (usize, usize);

/// Training annotations of each requested task, in dataset order.
pub fn task_samples(ds: &Dataset, tasks: &[Task]) -> Vec<(Task, Vec<SampleRef>)> {
    tasks
        .iter()
        .map(|&t| {
            let refs = ds
                .episodes
                .iter()
                .enumerate()
                .filter(|(_, e)| e.split == Split::Train)
                .flat_map(|(ei, e)| {
                    e.annotations
                        .iter()
                        .enumerate()
                        .filter(move |(_, a)| a.task == t)
                        .map(move |(ai, _)| (ei, ai))
                })
                .collect();
            (t, refs)
        })
        .collect()
}

/// Model input and targets of one sampled training window.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub window: VideoTensor,
    pub targets: WindowTargets,
}

fn clip(seg: Segment, start: usize, w: usize) -> Option<Segment> {
    let end = start + w - 1;
    (seg[1] >= start && seg[0] <= end).then(|| [seg[0].max(start) - start, seg[1].min(end) - start])
}

/// Subsamples the video by `stride`, places a window of (at most) `w`
/// frames around a GT segment and builds the targets. Every GT instance
/// falling into the window is marked foreground.
pub fn make_example(
    video: &VideoTensor,
    ann: &Annotation,
    w: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let v = video.subsample(stride);
    let t = v.len();
    let w = w.min(t);
    let segs: Vec<Segment> = ann.segments.iter().map(|&[s, e]| [s / stride, e / stride]).collect();
    let (start, k) = sample_training_window(&segs, w, t, rng)?;
    let target = clip(segs[k], start, w).expect("sampled window overlaps its segment");
    let fg: Vec<Segment> = segs.iter().filter_map(|&s| clip(s, start, w)).collect();
    let boxes = match (&ann.boxes, ann.task) {
        (Some(b), Task::Vq2d) => {
            let [s0, e0] = ann.segments[k];
            let boxes: Vec<BoxCxCyWh> = (target[0]..=target[1])
                .map(|f| b[((start + f) * stride).clamp(s0, e0) - s0])
                .collect();
            Some(boxes)
        }
        (None, Task::Vq2d) => return Err(Error::Contract(format!("{}: vq2d without boxes", ann.id))),
        _ => None,
    };
    Ok(TrainingExample {
        window: v.window(start, w)?,
        targets: WindowTargets::new(w, target, &fg, boxes)?,
    })
}

/// Loss breakdown and parameter gradients of one example.
pub fn example_gradients(
    model: &Model,
    task: Task,
    ex: &TrainingExample,
    ann: &Annotation,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Array<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape, true);
    let out = forward(&model.cfg, &mut tape, &p, &ex.window, &ann.query)?;
    let loss = task_loss(&mut tape, task, &out, &ex.targets, weights)?;
    let grads = tape.grad(loss.total, p.vars())?;
    Ok((loss.breakdown(&tape), grads))
}

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = model.params.entries().iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update; `lr` gives the rate of each parameter's group.
    pub fn update(&mut self, model: &mut Model, grads: &[Array<f32>], lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, p)) in model.params.entries_mut().enumerate() {
            let lr = lr(ParamGroup::of(name));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = *g as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let xf = *x as f64;
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + self.eps) + self.weight_decay * xf;
                *x = (xf - lr * upd) as f32;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array<f32>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = (max / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One line of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub task: Task,
    pub lr: f64,
    pub total: f64,
    pub kl_s: f64,
    pub kl_e: f64,
    pub bce: f64,
    pub att: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: Vec<StepLog>,
    pub epoch_mean_loss: Vec<f64>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    task: Task,
    annotations: Vec<&'a str>,
    breakdowns: Vec<LossBreakdown>,
}

fn nan_error(out: Option<&Path>, dump: &NanDump<'_>) -> Error {
    let mut msg = format!(
        "loss or gradient at step {} ({}, annotations {})",
        dump.step,
        dump.task,
        dump.annotations.join(", ")
    );
    if let Some(dir) = out {
        let path = dir.join("nan_batch.json");
        if let Ok(bytes) = serde_json::to_vec_pretty(dump) {
            if fs::write(&path, bytes).is_ok() {
                msg.push_str(&format!("; batch dumped to {}", path.display()));
            }
        }
    }
    Error::NonFinite(msg)
}

/// Where training writes its artefacts.
pub fn epoch_checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{:03}", epoch + 1))
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

/// Copies matching parameters from a checkpoint into `model`.
pub fn init_from(model: &mut Model, ckpt: &Path) -> Result<()> {
    let src = load_checkpoint(ckpt)?;
    model.params.load_from(&src.params)
}

/// Trains on the dataset's train split. With `out`, writes the JSON-lines
/// step log, one checkpoint per epoch and the final checkpoint.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    model.cfg.validate()?;
    let samples = task_samples(ds, &cfg.tasks);
    let sizes: Vec<(Task, usize)> = samples.iter().map(|(t, s)| (*t, s.len())).collect();
    let mut stream = BatchStream::new(&sizes, cfg.sampling, cfg.batch_size, cfg.seed)?;
    let per_epoch = stream.batches_per_epoch();
    let mut opt = AdamW::new(model, cfg);
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut summary = TrainSummary::default();
    let mut sample_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for _ in 0..per_epoch {
            let step = summary.steps.len();
            let batch = stream.next().expect("batch stream is endless");
            let list = &samples.iter().find(|(t, _)| *t == batch.task).expect("task listed").1;
            let jobs: Vec<(SampleRef, u64)> = batch
                .items
                .iter()
                .map(|&i| {
                    sample_counter += 1;
                    (list[i], sample_counter)
                })
                .collect();
            let w = model.cfg.window.get(batch.task);
            let stride = cfg.strides.get(batch.task);
            let results = jobs
                .par_iter()
                .map(|&((ei, ai), stream_id)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(stream_id);
                    let ep = &ds.episodes[ei];
                    let ann = &ep.annotations[ai];
                    let ex = make_example(&ep.video, ann, w, stride, &mut rng)?;
                    example_gradients(model, batch.task, &ex, ann, &cfg.loss)
                })
                .collect::<Result<Vec<_>>>()?;

            let n = results.len() as f64;
            let mut mean = LossBreakdown::default();
            let mut grads: Vec<Array<f32>> = Vec::new();
            for (b, g) in &results {
                mean.add_assign(b);
                if grads.is_empty() {
                    grads = g.clone();
                } else {
                    for (acc, x) in grads.iter_mut().zip(g) {
                        acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, v)| *a += v);
                    }
                }
            }
            let mean = mean.scaled(1.0 / n);
            let inv = (1.0 / n) as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            if !mean.total.is_finite() || !grads.iter().all(|g| g.all_finite()) {
                let dump = NanDump {
                    step,
                    epoch,
                    task: batch.task,
                    annotations: jobs
                        .iter()
                        .map(|&((ei, ai), _)| ds.episodes[ei].annotations[ai].id.as_str())
                        .collect(),
                    breakdowns: results.iter().map(|r| r.0).collect(),
                };
                return Err(nan_error(out, &dump));
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            opt.update(model, &grads, |g| cfg.lr(g, epoch))?;
            epoch_sum += mean.total;
            let entry = StepLog {
                step,
                epoch,
                task: batch.task,
                lr: cfg.lr(ParamGroup::Rest, epoch),
                total: mean.total,
                kl_s: mean.kl_s,
                kl_e: mean.kl_e,
                bce: mean.bce,
                att: mean.att,
                l1: mean.l1,
                giou: mean.giou,
            };
            if let Some((f, path)) = &mut log {
                let mut line = serde_json::to_vec(&entry)?;
                line.push(b'\n');
                f.write_all(&line).map_err(|e| Error::io(&*path, e))?;
            }
            summary.steps.push(entry);
        }
        summary.epoch_mean_loss.push(epoch_sum / per_epoch as f64);
        if let Some(dir) = out {
            save_checkpoint(model, &epoch_checkpoint_dir(dir, epoch))?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests;
