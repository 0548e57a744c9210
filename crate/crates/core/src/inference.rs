//! Long-video inference: sliding-window accumulation, foreground peak
//! detection, per-peak segment decoding, multi-scale pooling and NMS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, BoxCxCyWh, Query, Segment, Task, TaskMap, VideoTensor};
use crate::error::{Error, Result};
use crate::metrics::temporal_iou;
use crate::model::{FramePredictions, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Window length; `None` uses the model's training window for the task.
    pub window: Option<usize>,
    /// Window step; `None` uses half the window.
    pub step: Option<usize>,
    pub medfilt_kernel: usize,
    pub peak_thr_vq: f64,
    pub peak_thr_temporal: f64,
    pub max_peaks: usize,
    /// Span (frames, at the decoding scale) around the VQ2D peak.
    pub vq_peak_window: usize,
    /// Temporal subsampling strides per task.
    pub scales: TaskMap<Vec<usize>>,
    pub nms_thr: f64,
    pub use_foreground_head: bool,
    pub emit_boxes_for_temporal: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: None,
            step: None,
            medfilt_kernel: 5,
            peak_thr_vq: 0.5,
            peak_thr_temporal: 0.1,
            max_peaks: 1000,
            vq_peak_window: 24,
            scales: TaskMap {
                vq2d: vec![1],
                nlq: vec![1, 2, 4],
                mq: vec![1, 2, 4],
            },
            nms_thr: 0.4,
            use_foreground_head: true,
            emit_boxes_for_temporal: false,
        }
    }
}

impl InferenceConfig {
    pub fn full_scale() -> Self {
        Self {
            vq_peak_window: 70,
            scales: TaskMap {
                vq2d: vec![1],
                nlq: vec![1, 5],
                mq: vec![1, 2, 3, 5, 25],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.medfilt_kernel % 2 == 0 {
            return fail(format!("median filter kernel must be odd, got {}", self.medfilt_kernel));
        }
        for (name, v) in [
            ("peak_thr_vq", self.peak_thr_vq),
            ("peak_thr_temporal", self.peak_thr_temporal),
            ("nms_thr", self.nms_thr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let (Some(w), Some(k)) = (self.window, self.step) {
            if k == 0 || k > w {
                return fail(format!("step must satisfy 1 <= step <= window, got {k} for {w}"));
            }
        }
        if self.window == Some(0) || self.step == Some(0) {
            return fail("window and step must be >= 1".into());
        }
        for t in Task::ALL {
            let s = self.scales.get_ref(t);
            if s.is_empty() || s.contains(&0) {
                return fail(format!("{t} scales must be non-empty strides >= 1"));
            }
        }
        if self.vq_peak_window == 0 || self.max_peaks == 0 {
            return fail("vq_peak_window and max_peaks must be >= 1".into());
        }
        Ok(())
    }
}

/// A decoded temporal segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxCxCyWh>>,
}

impl Candidate {
    pub fn segment(&self) -> Segment {
        [self.start, self.end]
    }
}

/// One output record per (video, query).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub annotation_id: String,
    pub task: Task,
    /// Ranked by descending score; VQ2D holds exactly one tube.
    pub segments: Vec<Candidate>,
}

/// `[start, end)` windows with the given step; the last window is shifted
/// back so it ends at `t`.
pub fn slide_windows(t: usize, w: usize, step: usize) -> Vec<(usize, usize)> {
    if t == 0 {
        return Vec::new();
    }
    if w >= t {
        return vec![(0, t)];
    }
    let step = step.clamp(1, w);
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        if s + w >= t {
            out.push((t - w, t));
            break;
        }
        out.push((s, s + w));
        s += step;
    }
    out
}

/// Runs the model on every window and averages all seven channels over
/// the windows covering each frame.
pub fn accumulate(
    model: &Model,
    video: &VideoTensor,
    query: &Query,
    w: usize,
    step: usize,
) -> Result<FramePredictions> {
    let t = video.len();
    let windows = slide_windows(t, w, step);
    let outs = windows
        .par_iter()
        .map(|&(s, e)| model.predict(&video.window(s, e - s)?, query))
        .collect::<Result<Vec<_>>>()?;
    merge_windows(t, &windows, &outs)
}

/// Per-frame mean of every channel over the windows covering the frame.
/// Frames whose covering values agree keep that value exactly.
pub fn merge_windows(t: usize, windows: &[(usize, usize)], outs: &[FramePredictions]) -> Result<FramePredictions> {
    let mut sum = vec![[0.0f64; 7]; t];
    let mut lo = vec![[f64::INFINITY; 7]; t];
    let mut hi = vec![[f64::NEG_INFINITY; 7]; t];
    let mut count = vec![0usize; t];
    for (&(s, e), p) in windows.iter().zip(outs) {
        if p.len() != e - s || e > t {
            return Err(Error::Contract(format!(
                "window [{s}, {e}) got {} frames of predictions",
                p.len()
            )));
        }
        for i in 0..p.len() {
            let f = s + i;
            for (c, v) in p.row(i).into_iter().enumerate() {
                sum[f][c] += v;
                lo[f][c] = lo[f][c].min(v);
                hi[f][c] = hi[f][c].max(v);
            }
            count[f] += 1;
        }
    }
    let mut out = FramePredictions::zeros(t);
    for f in 0..t {
        if count[f] == 0 {
            return Err(Error::Contract(format!("frame {f} is not covered by any window")));
        }
        let n = count[f] as f64;
        let mut r = [0.0; 7];
        for c in 0..7 {
            r[c] = if lo[f][c] == hi[f][c] { lo[f][c] } else { sum[f][c] / n };
        }
        out.set_row(f, r);
    }
    Ok(out)
}

/// Centred running median with zero padding.
pub fn median_filter(scores: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("median filter kernel must be odd, got {kernel}")));
    }
    let half = kernel / 2;
    let n = scores.len();
    let mut buf = Vec::with_capacity(kernel);
    Ok((0..n)
        .map(|i| {
            buf.clear();
            for k in 0..kernel {
                let j = i as i64 + k as i64 - half as i64;
                buf.push(if j < 0 || j >= n as i64 { 0.0 } else { scores[j as usize] });
            }
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect())
}

/// One peak per contiguous run above `thr` (earliest maximum of the run),
/// keeping the `max_peaks` highest, returned in index order.
pub fn find_peaks(scores: &[f64], thr: f64, max_peaks: usize) -> Vec<(usize, f64)> {
    let mut peaks = Vec::new();
    let mut run: Option<(usize, f64)> = None;
    for (i, &v) in scores.iter().enumerate() {
        if v > thr {
            run = match run {
                Some((bi, bv)) if bv >= v => Some((bi, bv)),
                _ => Some((i, v)),
            };
        } else if let Some(p) = run.take() {
            peaks.push(p);
        }
    }
    peaks.extend(run);
    if peaks.len() > max_peaks {
        let mut by_score: Vec<usize> = (0..peaks.len()).collect();
        by_score.sort_by(|&a, &b| peaks[b].1.total_cmp(&peaks[a].1).then(a.cmp(&b)));
        let mut keep = by_score[..max_peaks].to_vec();
        keep.sort_unstable();
        peaks = keep.into_iter().map(|i| peaks[i]).collect();
    }
    peaks
}

fn softmax_range(logits: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let m = logits[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits[lo..=hi].iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Best `(i, j)`, `i ≤ j`, by `p_s(i)·p_e(j)` inside the `span`-frame
/// window centred at `peak`. Returns the pair and its joint probability.
pub fn decode_span(preds: &FramePredictions, peak: usize, span: usize) -> (Segment, f64) {
    let t = preds.len();
    let span = span.clamp(1, t);
    let lo = peak.saturating_sub(span / 2).min(t - 1);
    let hi = (lo + span - 1).min(t - 1);
    let ps = softmax_range(&preds.start_logits, lo, hi);
    let pe = softmax_range(&preds.end_logits, lo, hi);
    let mut best_i = 0;
    let mut best = (0, 0, f64::NEG_INFINITY);
    for j in 0..ps.len() {
        if ps[j] > ps[best_i] {
            best_i = j;
        }
        let v = ps[best_i] * pe[j];
        if v > best.2 {
            best = (best_i, j, v);
        }
    }
    ([lo + best.0, lo + best.1], best.2)
}

/// Decodes one candidate around a peak; its score is the peak score.
pub fn decode_segment_at_peak(
    preds: &FramePredictions,
    peak: (usize, f64),
    span: usize,
    with_boxes: bool,
) -> Candidate {
    let ([s, e], _) = decode_span(preds, peak.0, span);
    Candidate {
        start: s,
        end: e,
        score: peak.1,
        boxes: with_boxes.then(|| preds.boxes[s..=e].to_vec()),
    }
}

fn whole_video(preds: &FramePredictions, with_boxes: bool) -> Candidate {
    let t = preds.len();
    let ([s, e], joint) = decode_span(preds, t / 2, t);
    Candidate {
        start: s,
        end: e,
        score: joint,
        boxes: with_boxes.then(|| preds.boxes[s..=e].to_vec()),
    }
}

/// Tube for the most recent foreground peak.
pub fn infer_vq2d(preds: &FramePredictions, cfg: &InferenceConfig) -> Result<Candidate> {
    if preds.is_empty() {
        return Err(Error::Contract("no frames to decode".into()));
    }
    if !cfg.use_foreground_head {
        return Ok(whole_video(preds, true));
    }
    let filtered = median_filter(&preds.foreground, cfg.medfilt_kernel)?;
    let peaks = find_peaks(&filtered, cfg.peak_thr_vq, cfg.max_peaks);
    let peak = match peaks.last() {
        Some(&p) => p,
        None => {
            let mut best = 0;
            for (i, &v) in filtered.iter().enumerate() {
                if v > filtered[best] {
                    best = i;
                }
            }
            (best, filtered[best])
        }
    };
    Ok(decode_segment_at_peak(preds, peak, cfg.vq_peak_window, true))
}

/// Ranked segments, one per foreground peak.
pub fn infer_temporal(preds: &FramePredictions, cfg: &InferenceConfig, span: usize) -> Result<Vec<Candidate>> {
    if preds.is_empty() {
        return Ok(Vec::new());
    }
    if !cfg.use_foreground_head {
        return Ok(vec![whole_video(preds, cfg.emit_boxes_for_temporal)]);
    }
    let filtered = median_filter(&preds.foreground, cfg.medfilt_kernel)?;
    let peaks = find_peaks(&filtered, cfg.peak_thr_temporal, cfg.max_peaks);
    let mut out: Vec<Candidate> = peaks
        .into_iter()
        .map(|p| decode_segment_at_peak(preds, p, span, cfg.emit_boxes_for_temporal))
        .collect();
    sort_by_score(&mut out);
    Ok(out)
}

/// Descending score, earlier start first on ties.
pub fn sort_by_score(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
}

/// Greedy suppression of candidates overlapping a kept one by tIoU > thr.
pub fn temporal_nms(cands: &[Candidate], thr: f64) -> Vec<Candidate> {
    let mut sorted = cands.to_vec();
    sort_by_score(&mut sorted);
    let mut keep: Vec<Candidate> = Vec::new();
    for c in sorted {
        if keep.iter().all(|k| temporal_iou(k.segment(), c.segment()) <= thr) {
            keep.push(c);
        }
    }
    keep
}

/// Maps a candidate found at stride `r` back to original frame indices;
/// boxes are repeated over the frames each sample stands for.
pub fn remap(c: &Candidate, r: usize, t: usize) -> Candidate {
    let start = r * c.start;
    let end = (r * c.end + r - 1).min(t - 1);
    let boxes = c.boxes.as_ref().map(|b| {
        (start..=end)
            .map(|f| b[((f / r) - c.start).min(b.len() - 1)])
            .collect()
    });
    Candidate {
        start,
        end,
        score: c.score,
        boxes,
    }
}

/// Per-scale candidates remapped to original indices, before pooling.
pub fn scale_candidates(
    model: &Model,
    video: &VideoTensor,
    query: &Query,
    task: Task,
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<Candidate>>> {
    let t = video.len();
    let w = cfg.window.unwrap_or_else(|| model.cfg.window.get(task));
    let step = cfg.step.unwrap_or((w / 2).max(1));
    cfg.scales
        .get_ref(task)
        .iter()
        .map(|&r| {
            let v = video.subsample(r);
            let preds = accumulate(model, &v, query, w, step)?;
            let local = match task {
                Task::Vq2d => vec![infer_vq2d(&preds, cfg)?],
                _ => infer_temporal(&preds, cfg, w)?,
            };
            Ok(local.iter().map(|c| remap(c, r, t)).collect())
        })
        .collect()
}

/// Pools every scale's candidates, applies NMS and re-ranks. VQ2D keeps
/// only the top tube.
pub fn multiscale_infer(
    model: &Model,
    video: &VideoTensor,
    query: &Query,
    task: Task,
    cfg: &InferenceConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let pooled: Vec<Candidate> = scale_candidates(model, video, query, task, cfg)?
        .into_iter()
        .flatten()
        .collect();
    let mut out = temporal_nms(&pooled, cfg.nms_thr);
    match task {
        Task::Vq2d => out.truncate(1),
        _ => out.truncate(cfg.max_peaks),
    }
    Ok(out)
}

/// Inference for one annotation's query on its video.
pub fn predict_annotation(
    model: &Model,
    video: &VideoTensor,
    ann: &Annotation,
    cfg: &InferenceConfig,
) -> Result<PredictionRecord> {
    let clip;
    let video = match ann.query_frame {
        Some(q) if q + 1 < video.len() => {
            clip = video.window(0, q + 1)?;
            &clip
        }
        _ => video,
    };
    Ok(PredictionRecord {
        video_id: ann.video_id.clone(),
        annotation_id: ann.id.clone(),
        task: ann.task,
        segments: multiscale_infer(model, video, &ann.query, ann.task, cfg)?,
    })
}

/// Predictions for every `(video, annotation)` pair, in input order.
pub fn predict_all(
    model: &Model,
    items: &[(&VideoTensor, &Annotation)],
    cfg: &InferenceConfig,
) -> Result<Vec<PredictionRecord>> {
    cfg.validate()?;
    items
        .par_iter()
        .map(|(v, a)| predict_annotation(model, v, a, cfg))
        .collect()
}
