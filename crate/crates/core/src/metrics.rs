//! Evaluation: temporal and spatio-temporal IoU, AP, recovery, success,
//! recall@k, and random box/segment baselines run through the same report.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{Annotation, BoxCxCyWh, Segment, Task};
use crate::error::{Error, Result};
use crate::inference::{Candidate, PredictionRecord};

/// Inclusive-frame temporal IoU.
pub fn temporal_iou(a: Segment, b: Segment) -> f64 {
    let lo = a[0].max(b[0]);
    let hi = a[1].min(b[1]);
    if hi < lo {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = (a[1] - a[0] + 1 + b[1] - b[0] + 1) as f64 - inter;
    inter / union
}

fn area(b: BoxCxCyWh) -> f64 {
    b[2].max(0.0) * b[3].max(0.0)
}

fn intersection(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    if a == b {
        return area(a);
    }
    let w = (a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0);
    let h = (a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0);
    w.max(0.0) * h.max(0.0)
}

pub fn box_iou(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Frame-indexed boxes over an inclusive segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub segment: Segment,
    pub boxes: Vec<BoxCxCyWh>,
}

impl Tube {
    pub fn new(segment: Segment, boxes: Vec<BoxCxCyWh>) -> Result<Self> {
        if segment[0] > segment[1] || boxes.len() != segment[1] - segment[0] + 1 {
            return Err(Error::Contract(format!(
                "tube over {:?} with {} boxes",
                segment,
                boxes.len()
            )));
        }
        Ok(Self { segment, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn at(&self, t: usize) -> Option<BoxCxCyWh> {
        (self.segment[0]..=self.segment[1])
            .contains(&t)
            .then(|| self.boxes[t - self.segment[0]])
    }
}

/// Summed per-frame box intersection over summed union across the
/// temporal union of both tubes.
pub fn st_tube_iou(pred: &Tube, gt: &Tube) -> f64 {
    let lo = pred.segment[0].min(gt.segment[0]);
    let hi = pred.segment[1].max(gt.segment[1]);
    let (mut inter, mut union) = (0.0, 0.0);
    for t in lo..=hi {
        match (pred.at(t), gt.at(t)) {
            (Some(a), Some(b)) => {
                let i = intersection(a, b);
                inter += i;
                union += area(a) + area(b) - i;
            }
            (Some(a), None) | (None, Some(a)) => union += area(a),
            (None, None) => {}
        }
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Percentage of predicted-tube frames whose box overlaps the GT box of
/// the same frame by IoU ≥ `thr`.
pub fn recovery(pred: &Tube, gt: &Tube, thr: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = (pred.segment[0]..=pred.segment[1])
        .filter(|&t| match (pred.at(t), gt.at(t)) {
            (Some(a), Some(b)) => box_iou(a, b) >= thr,
            _ => false,
        })
        .count();
    100.0 * hits as f64 / pred.len() as f64
}

pub fn success(pred: &Tube, gt: &Tube, thr: f64) -> bool {
    st_tube_iou(pred, gt) >= thr
}

/// Scored predictions and ground truths of one query.
#[derive(Clone, Debug)]
pub struct ApSample<P, G> {
    pub preds: Vec<(P, f64)>,
    pub gts: Vec<G>,
}

/// All-point interpolated AP with greedy one-to-one matching of pooled,
/// score-sorted predictions against their own sample's GTs.
pub fn average_precision<P, G>(
    samples: &[ApSample<P, G>],
    iou: impl Fn(&P, &G) -> f64,
    thr: f64,
) -> Result<f64> {
    let total_gt: usize = samples.iter().map(|s| s.gts.len()).sum();
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (pi, (_, score)) in s.preds.iter().enumerate() {
            if !score.is_finite() {
                return Err(Error::Contract(format!(
                    "prediction {pi} of sample {si} has no finite score"
                )));
            }
            order.push((si, pi, *score));
        }
    }
    if total_gt == 0 {
        return Ok(0.0);
    }
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(si, pi, _) in &order {
        let p = &samples[si].preds[pi].0;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in samples[si].gts.iter().enumerate() {
            if used[si][gi] {
                continue;
            }
            let v = iou(p, g);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            used[si][gi] = true;
        }
        tp_flags.push(best.is_some());
    }
    Ok(interpolated_ap(&tp_flags, total_gt))
}

/// Area under the precision envelope of a ranked TP/FP list.
fn interpolated_ap(tp: &[bool], total_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / total_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for i in 0..prec.len() {
        if rec[i] > last_r {
            ap += (rec[i] - last_r) * prec[i];
            last_r = rec[i];
        }
    }
    ap
}

/// Percentage of GT segments matched (tIoU ≥ `m`) by any of the first
/// `k·n` ranked predictions of their sample, `n` being the sample's GT
/// count. With one GT per sample this is plain top-k recall per query.
pub fn recall_at_k(samples: &[(Vec<Segment>, Vec<Segment>)], k: usize, m: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("recall@k needs k >= 1".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (preds, gts) in samples {
        for g in gts {
            total += 1;
            if preds.iter().take(k * gts.len()).any(|p| temporal_iou(*p, *g) >= m) {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        100.0 * hit as f64 / total as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub tiou_ap: f64,
    pub recall_tious: Vec<f64>,
    pub recall_ks: Vec<usize>,
    pub recovery_box_iou: f64,
    pub success_iou: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            tiou_ap: 0.25,
            recall_tious: vec![0.3, 0.5],
            recall_ks: vec![1, 5],
            recovery_box_iou: 0.5,
            success_iou: 0.05,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(self.tiou_ap)
            || !ok(self.recovery_box_iou)
            || !ok(self.success_iou)
            || !self.recall_tious.iter().all(|&v| ok(v))
        {
            return Err(Error::Config("metric thresholds must lie in (0, 1]".into()));
        }
        if self.recall_ks.contains(&0) {
            return Err(Error::Config("recall@k needs k >= 1".into()));
        }
        Ok(())
    }

    fn ap_key(&self, prefix: &str) -> String {
        format!("{prefix}{}", (self.tiou_ap * 100.0).round())
    }
}

pub fn recall_key(k: usize, m: f64) -> String {
    format!("r@{k} tIoU={m}")
}

pub const ZERO_SHOT_BOX_KEY: &str = "box IoU";

/// Named metric values of one task, in display order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: Task,
    pub n: usize,
    pub metrics: Vec<(String, f64)>,
}

impl TaskReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

impl Serialize for TaskReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.metrics.len() + 1))?;
        m.serialize_entry("n", &self.n)?;
        for (k, v) in &self.metrics {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vq2d: Option<TaskReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlq: Option<TaskReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mq: Option<TaskReport>,
}

impl Report {
    pub fn task(&self, t: Task) -> Option<&TaskReport> {
        match t {
            Task::Vq2d => self.vq2d.as_ref(),
            Task::Nlq => self.nlq.as_ref(),
            Task::Mq => self.mq.as_ref(),
        }
    }

    pub fn get(&self, t: Task, name: &str) -> Option<f64> {
        self.task(t).and_then(|r| r.get(name))
    }

    /// Element-wise mean of reports with identical layout.
    pub fn mean(reports: &[Report]) -> Report {
        let avg = |pick: fn(&Report) -> Option<&TaskReport>| -> Option<TaskReport> {
            let first = pick(reports.first()?)?.clone();
            let mut out = first.clone();
            for (i, (name, v)) in out.metrics.iter_mut().enumerate() {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| pick(r).and_then(|t| t.metrics.get(i)).filter(|m| &m.0 == name))
                    .map(|m| m.1)
                    .collect();
                *v = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            }
            Some(out)
        };
        Report {
            vq2d: avg(|r| r.vq2d.as_ref()),
            nlq: avg(|r| r.nlq.as_ref()),
            mq: avg(|r| r.mq.as_ref()),
        }
    }
}

impl fmt::Display for Report {
    /// Aligned text table, one block per task.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in [&self.vq2d, &self.nlq, &self.mq].into_iter().flatten() {
            let mut head = format!("{:<6}{:>6}", "task", "n");
            let mut row = format!("{:<6}{:>6}", r.task.name(), r.n);
            for (k, v) in &r.metrics {
                let w = k.len().max(8) + 2;
                head.push_str(&format!("{k:>w$}"));
                row.push_str(&format!("{:>w$.3}", v));
            }
            writeln!(f, "{head}")?;
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Ground truth of one annotation plus its video length.
#[derive(Clone, Copy, Debug)]
pub struct GtRef<'a> {
    pub ann: &'a Annotation,
    pub video_len: usize,
}

fn gt_tube(a: &Annotation) -> Option<Tube> {
    a.boxes
        .as_ref()
        .and_then(|b| Tube::new(a.segments[0], b.clone()).ok())
}

fn cand_tube(c: &Candidate) -> Option<Tube> {
    c.boxes.as_ref().and_then(|b| Tube::new(c.segment(), b.clone()).ok())
}

/// Scores predictions against ground truth. Annotations without a record
/// count as misses; records naming unknown videos or annotations are an
/// error.
pub fn evaluate(records: &[PredictionRecord], gts: &[GtRef<'_>], cfg: &MetricConfig) -> Result<Report> {
    cfg.validate()?;
    let videos: HashSet<&str> = gts.iter().map(|g| g.ann.video_id.as_str()).collect();
    let mut unknown: Vec<String> = records
        .iter()
        .filter(|r| !videos.contains(r.video_id.as_str()))
        .map(|r| r.video_id.clone())
        .collect();
    unknown.sort();
    unknown.dedup();
    if !unknown.is_empty() {
        return Err(Error::Contract(format!("unknown video ids: {}", unknown.join(", "))));
    }
    let by_id: HashMap<&str, &PredictionRecord> =
        records.iter().map(|r| (r.annotation_id.as_str(), r)).collect();
    let known: HashSet<&str> = gts.iter().map(|g| g.ann.id.as_str()).collect();
    let stray: Vec<&str> = records
        .iter()
        .map(|r| r.annotation_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !stray.is_empty() {
        return Err(Error::Contract(format!("unknown annotation ids: {}", stray.join(", "))));
    }

    let mut report = Report::default();
    for task in Task::ALL {
        let items: Vec<(&Annotation, &[Candidate])> = gts
            .iter()
            .filter(|g| g.ann.task == task)
            .map(|g| {
                let preds = by_id.get(g.ann.id.as_str()).map(|r| r.segments.as_slice()).unwrap_or(&[]);
                (g.ann, preds)
            })
            .collect();
        if items.is_empty() {
            continue;
        }
        let n = items.len();
        let mut metrics = Vec::new();
        match task {
            Task::Vq2d => {
                let t_samples: Vec<ApSample<Segment, Segment>> = items
                    .iter()
                    .map(|(a, p)| ApSample {
                        preds: p.iter().take(1).map(|c| (c.segment(), c.score)).collect(),
                        gts: a.segments.clone(),
                    })
                    .collect();
                let st_samples: Vec<ApSample<Tube, Tube>> = items
                    .iter()
                    .map(|(a, p)| ApSample {
                        preds: p
                            .iter()
                            .take(1)
                            .filter_map(|c| cand_tube(c).map(|t| (t, c.score)))
                            .collect(),
                        gts: gt_tube(a).into_iter().collect(),
                    })
                    .collect();
                metrics.push((
                    cfg.ap_key("tAP"),
                    average_precision(&t_samples, |p, g| temporal_iou(*p, *g), cfg.tiou_ap)?,
                ));
                metrics.push((
                    cfg.ap_key("stAP"),
                    average_precision(&st_samples, st_tube_iou, cfg.tiou_ap)?,
                ));
                let (mut rec, mut succ) = (0.0, 0usize);
                for (a, p) in &items {
                    if let (Some(pt), Some(gt)) = (p.first().and_then(cand_tube), gt_tube(a)) {
                        rec += recovery(&pt, &gt, cfg.recovery_box_iou);
                        succ += success(&pt, &gt, cfg.success_iou) as usize;
                    }
                }
                metrics.push(("rec%".into(), rec / n as f64));
                metrics.push(("Succ".into(), 100.0 * succ as f64 / n as f64));
            }
            Task::Nlq | Task::Mq => {
                let samples: Vec<(Vec<Segment>, Vec<Segment>)> = items
                    .iter()
                    .map(|(a, p)| (p.iter().map(Candidate::segment).collect(), a.segments.clone()))
                    .collect();
                if task == Task::Mq {
                    let ap: Vec<ApSample<Segment, Segment>> = items
                        .iter()
                        .map(|(a, p)| ApSample {
                            preds: p.iter().map(|c| (c.segment(), c.score)).collect(),
                            gts: a.segments.clone(),
                        })
                        .collect();
                    metrics.push((
                        cfg.ap_key("tAP"),
                        average_precision(&ap, |p, g| temporal_iou(*p, *g), cfg.tiou_ap)?,
                    ));
                }
                for &m in &cfg.recall_tious {
                    for &k in &cfg.recall_ks {
                        metrics.push((recall_key(k, m), recall_at_k(&samples, k, m)?));
                    }
                }
                if task == Task::Nlq && items.iter().any(|(_, p)| p.first().is_some_and(|c| c.boxes.is_some())) {
                    let thr = cfg.recall_tious.first().copied().unwrap_or(0.3);
                    metrics.push((ZERO_SHOT_BOX_KEY.into(), retrieved_box_iou(&items, thr)));
                }
            }
        }
        let tr = TaskReport { task, n, metrics };
        match task {
            Task::Vq2d => report.vq2d = Some(tr),
            Task::Nlq => report.nlq = Some(tr),
            Task::Mq => report.mq = Some(tr),
        }
    }
    Ok(report)
}

/// Mean per-frame box IoU over frames shared by the top-1 candidate and
/// the GT, for queries whose top-1 segment reaches tIoU ≥ `thr`.
fn retrieved_box_iou(items: &[(&Annotation, &[Candidate])], thr: f64) -> f64 {
    let (mut sum, mut frames) = (0.0, 0usize);
    for (a, p) in items {
        let (Some(c), Some(gt)) = (p.first(), gt_tube(a)) else {
            continue;
        };
        let Some(pt) = cand_tube(c) else { continue };
        if temporal_iou(c.segment(), a.segments[0]) < thr {
            continue;
        }
        for t in c.start.max(gt.segment[0])..=c.end.min(gt.segment[1]) {
            if let (Some(x), Some(y)) = (pt.at(t), gt.at(t)) {
                sum += box_iou(x, y);
                frames += 1;
            }
        }
    }
    if frames == 0 {
        0.0
    } else {
        sum / frames as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    RandomBoxes,
    RandomCentered,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_boxes" | "random" => Ok(Self::RandomBoxes),
            "random_centered" | "centered" => Ok(Self::RandomCentered),
            o => Err(Error::Config(format!("unknown baseline `{o}`"))),
        }
    }
}

pub fn random_box(mode: BaselineMode, rng: &mut ChaCha8Rng) -> BoxCxCyWh {
    match mode {
        BaselineMode::RandomBoxes => {
            let w = rng.random_range(0.1..1.0);
            let h = rng.random_range(0.1..1.0);
            [
                rng.random_range(w / 2.0..=1.0 - w / 2.0),
                rng.random_range(h / 2.0..=1.0 - h / 2.0),
                w,
                h,
            ]
        }
        BaselineMode::RandomCentered => {
            [0.5, 0.5, rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)]
        }
    }
}

const BASELINE_CANDIDATES: usize = 5;

fn random_segment(t: usize, rng: &mut ChaCha8Rng) -> Segment {
    let max_len = (t as f64 * 0.1).ceil().max(1.0) as usize;
    let len = rng.random_range(1..=max_len.min(t));
    let s = rng.random_range(0..=t - len);
    [s, s + len - 1]
}

/// Random segments (and boxes for the spatial tasks) for every annotation.
pub fn random_predictions(gts: &[GtRef<'_>], mode: BaselineMode, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gts.iter()
        .map(|g| {
            let a = g.ann;
            let t = a.query_frame.map_or(g.video_len, |q| q + 1).min(g.video_len);
            let n = if a.task == Task::Vq2d { 1 } else { BASELINE_CANDIDATES };
            let mut segments: Vec<Candidate> = (0..n)
                .map(|_| {
                    let [s, e] = random_segment(t, &mut rng);
                    let boxes = (a.task != Task::Mq)
                        .then(|| (s..=e).map(|_| random_box(mode, &mut rng)).collect());
                    Candidate {
                        start: s,
                        end: e,
                        score: rng.random_range(0.0..1.0),
                        boxes,
                    }
                })
                .collect();
            crate::inference::sort_by_score(&mut segments);
            PredictionRecord {
                video_id: a.video_id.clone(),
                annotation_id: a.id.clone(),
                task: a.task,
                segments,
            }
        })
        .collect()
}

/// Copies `records` replacing every attached box with a random one.
pub fn randomize_boxes(records: &[PredictionRecord], mode: BaselineMode, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for c in &mut r.segments {
                if let Some(b) = &mut c.boxes {
                    b.iter_mut().for_each(|x| *x = random_box(mode, &mut rng));
                }
            }
            r
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineReport {
    pub mode: BaselineMode,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Report>,
    pub mean: Report,
}

/// Random baseline repeated over `repeats` consecutive seeds.
pub fn random_baselines(
    gts: &[GtRef<'_>],
    mode: BaselineMode,
    seed: u64,
    repeats: usize,
    cfg: &MetricConfig,
) -> Result<BaselineReport> {
    let seeds: Vec<u64> = (0..repeats.max(1) as u64).map(|i| seed + i).collect();
    let per_seed = seeds
        .iter()
        .map(|&s| evaluate(&random_predictions(gts, mode, s), gts, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineReport {
        mode,
        mean: Report::mean(&per_seed),
        seeds,
        per_seed,
    })
}

#[cfg(test)]
mod tests;
