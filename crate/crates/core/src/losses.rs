//! Training objectives: box regression on the response frames and the
//! temporal terms (start/end distributions, foreground, attention guidance).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{BoxCxCyWh, Segment, Task};
use crate::error::{Error, Result};
use crate::model::ForwardOut;
use crate::tensors::{Array, Float, Tape, Var};

const BCE_CLAMP: f64 = 1e-6;
const ATT_EPS: f64 = 1e-8;
const MIN_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub kl: f64,
    pub att: f64,
    pub fg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            kl: 10.0,
            att: 1.0,
            fg: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.giou, self.kl, self.att, self.fg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Targets for one training window, in window-local frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTargets {
    pub s: usize,
    pub e: usize,
    pub p_s: Vec<f64>,
    pub p_e: Vec<f64>,
    pub foreground: Vec<f64>,
    /// One box per frame of `s..=e`.
    pub boxes: Option<Vec<BoxCxCyWh>>,
}

impl WindowTargets {
    /// `segment` is the supervised GT segment, already clipped to
    /// `0..w`. `foreground` lists every clipped segment whose frames are
    /// marked positive (it normally contains `segment` itself).
    pub fn new(
        w: usize,
        segment: Segment,
        foreground: &[Segment],
        boxes: Option<Vec<BoxCxCyWh>>,
    ) -> Result<Self> {
        let [s, e] = segment;
        if s > e || e >= w {
            return Err(Error::Contract(format!(
                "target segment [{s}, {e}] outside window of {w}"
            )));
        }
        if let Some(b) = &boxes {
            if b.len() != e - s + 1 {
                return Err(Error::Contract(format!(
                    "{} boxes for {} target frames",
                    b.len(),
                    e - s + 1
                )));
            }
        }
        let mut fg = vec![0.0; w];
        for &[a, b] in foreground.iter().chain(std::iter::once(&segment)) {
            for f in fg.iter_mut().take(b.min(w - 1) + 1).skip(a) {
                *f = 1.0;
            }
        }
        Ok(Self {
            s,
            e,
            p_s: gaussian_target(s, w),
            p_e: gaussian_target(e, w),
            foreground: fg,
            boxes,
        })
    }
}

/// Unit-variance normal density at integer offsets from `center`,
/// renormalised over `0..w`.
pub fn gaussian_target(center: usize, w: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..w)
        .map(|t| {
            let x = t as f64 - center as f64;
            (-0.5 * x * x).exp()
        })
        .collect();
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

fn constant<F: Float>(tape: &mut Tape<F>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(tape.constant(Array::from_f64(shape, data)?))
}

fn check_boxes<F: Float>(tape: &Tape<F>, pred: Var, target: &[BoxCxCyWh]) -> Result<usize> {
    let s = tape.shape(pred);
    if s.len() != 2 || s[1] != 4 || s[0] != target.len() || target.is_empty() {
        return Err(Error::Shape(format!(
            "box prediction {:?} vs {} target boxes",
            s,
            target.len()
        )));
    }
    Ok(s[0])
}

/// Mean over boxes of the summed absolute coordinate error.
pub fn l1_box_loss<F: Float>(tape: &mut Tape<F>, pred: Var, target: &[BoxCxCyWh]) -> Result<Var> {
    let n = check_boxes(tape, pred, target)?;
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    let t = constant(tape, &[n, 4], &flat)?;
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, F::of(1.0 / n as f64)))
}

fn column<F: Float>(tape: &mut Tape<F>, x: Var, n: usize, c: usize) -> Result<Var> {
    let idx: Arc<[usize]> = (0..n).map(|i| i * 4 + c).collect();
    tape.gather(x, idx, &[n])
}

/// Corners `(x1, y1, x2, y2)` of `[n, 4]` centre-size boxes.
fn corners<F: Float>(tape: &mut Tape<F>, b: Var, n: usize) -> Result<[Var; 4]> {
    let cx = column(tape, b, n, 0)?;
    let cy = column(tape, b, n, 1)?;
    let w = column(tape, b, n, 2)?;
    let h = column(tape, b, n, 3)?;
    let hw = tape.scale(w, F::of(0.5));
    let hh = tape.scale(h, F::of(0.5));
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// Mean over boxes of `1 − gIoU`.
pub fn giou_loss<F: Float>(tape: &mut Tape<F>, pred: Var, target: &[BoxCxCyWh]) -> Result<Var> {
    let n = check_boxes(tape, pred, target)?;
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    let t = constant(tape, &[n, 4], &flat)?;
    let [ax1, ay1, ax2, ay2] = corners(tape, pred, n)?;
    let [bx1, by1, bx2, by2] = corners(tape, t, n)?;

    let extent = |tape: &mut Tape<F>, lo: Var, hi: Var| -> Result<Var> {
        let d = tape.sub(hi, lo)?;
        Ok(tape.relu(d))
    };
    let area_a = {
        let w = extent(tape, ax1, ax2)?;
        let h = extent(tape, ay1, ay2)?;
        tape.mul(w, h)?
    };
    let area_b = {
        let w = extent(tape, bx1, bx2)?;
        let h = extent(tape, by1, by2)?;
        tape.mul(w, h)?
    };
    let inter = {
        let lx = tape.maximum(ax1, bx1)?;
        let hx = tape.minimum(ax2, bx2)?;
        let ly = tape.maximum(ay1, by1)?;
        let hy = tape.minimum(ay2, by2)?;
        let w = extent(tape, lx, hx)?;
        let h = extent(tape, ly, hy)?;
        tape.mul(w, h)?
    };
    let hull = {
        let lx = tape.minimum(ax1, bx1)?;
        let hx = tape.maximum(ax2, bx2)?;
        let ly = tape.minimum(ay1, by1)?;
        let hy = tape.maximum(ay2, by2)?;
        let w = extent(tape, lx, hx)?;
        let h = extent(tape, ly, hy)?;
        tape.mul(w, h)?
    };
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let union_safe = tape.clamp(union, F::of(MIN_AREA), F::infinity());
    let hull_safe = tape.clamp(hull, F::of(MIN_AREA), F::infinity());
    let iou = tape.div(inter, union_safe)?;
    let slack = tape.sub(hull_safe, union)?;
    let slack = tape.div(slack, hull_safe)?;
    let giou = tape.sub(iou, slack)?;
    // 1 - mean(giou)
    let m = tape.mean(giou);
    let neg = tape.scale(m, -F::one());
    Ok(tape.offset(neg, F::one()))
}

/// `KL(p ‖ softmax(logits))` with `0·log 0 = 0`.
pub fn kl_loss<F: Float>(tape: &mut Tape<F>, logits: Var, p: &[f64]) -> Result<Var> {
    let w = tape.value(logits).len();
    if p.len() != w {
        return Err(Error::Shape(format!("{} logits vs {} targets", w, p.len())));
    }
    let entropy_term: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let ls = tape.log_softmax(logits);
    let ls = tape.reshape(ls, &[w])?;
    let pc = constant(tape, &[w], p)?;
    let cross = tape.mul(ls, pc)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -F::one());
    Ok(tape.offset(neg, F::of(entropy_term)))
}

/// Positive weight `α = #zeros / #ones`, clamped to `[1, 100]`; 1 without
/// positives.
pub fn positive_weight(f: &[f64]) -> f64 {
    let ones = f.iter().filter(|&&v| v > 0.5).count();
    if ones == 0 {
        return 1.0;
    }
    ((f.len() - ones) as f64 / ones as f64).clamp(1.0, 100.0)
}

/// Positive-weighted binary cross-entropy on probabilities.
pub fn foreground_bce<F: Float>(tape: &mut Tape<F>, fhat: Var, f: &[f64]) -> Result<Var> {
    let w = tape.value(fhat).len();
    if f.len() != w || w == 0 {
        return Err(Error::Shape(format!("{} scores vs {} labels", w, f.len())));
    }
    let alpha = positive_weight(f);
    let x = tape.clamp(fhat, F::of(BCE_CLAMP), F::of(1.0 - BCE_CLAMP));
    let log_p = tape.log(x);
    let neg_x = tape.scale(x, -F::one());
    let one_minus = tape.offset(neg_x, F::one());
    let log_q = tape.log(one_minus);
    let wp: Vec<f64> = f.iter().map(|&v| alpha * v).collect();
    let wn: Vec<f64> = f.iter().map(|&v| 1.0 - v).collect();
    let wp = constant(tape, &[w], &wp)?;
    let wn = constant(tape, &[w], &wn)?;
    let log_p = tape.reshape(log_p, &[w])?;
    let log_q = tape.reshape(log_q, &[w])?;
    let a = tape.mul(log_p, wp)?;
    let b = tape.mul(log_q, wn)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, F::of(-1.0 / w as f64)))
}

/// `−(1/T) Σ_t log(Σ_{t'∈[s,e]} Ā[t,t'] + ε)` with `Ā` the mean of the
/// given `[heads, T, T]` maps over layers and heads.
pub fn guided_attention_loss<F: Float>(
    tape: &mut Tape<F>,
    maps: &[Var],
    s: usize,
    e: usize,
) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Contract("no attention maps".into()));
    }
    let shape = tape.shape(maps[0]).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!("attention map {:?}", shape)));
    }
    let t = shape[1];
    if s > e || e >= t {
        return Err(Error::Contract(format!("segment [{s}, {e}] outside {t} frames")));
    }
    let all = tape.concat(maps, 0)?;
    let groups = tape.shape(all)[0];
    let all = tape.reshape(all, &[groups * t, t])?;
    let inside: Vec<f64> = (0..t).map(|i| if (s..=e).contains(&i) { 1.0 } else { 0.0 }).collect();
    let inside = constant(tape, &[t, 1], &inside)?;
    let mass = tape.matmul(all, inside)?;
    let mass = tape.reshape(mass, &[groups, t])?;
    let avg = constant(tape, &[1, groups], &vec![1.0 / groups as f64; groups])?;
    let mass = tape.matmul(avg, mass)?;
    let mass = tape.offset(mass, F::of(ATT_EPS));
    let l = tape.log(mass);
    let m = tape.mean(l);
    Ok(tape.scale(m, -F::one()))
}

/// Weighted loss contributions of one sample; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl_s: f64,
    pub kl_e: f64,
    pub bce: f64,
    pub att: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    pub fn spatial(&self) -> f64 {
        self.l1 + self.giou
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.kl_s += o.kl_s;
        self.kl_e += o.kl_e;
        self.bce += o.bce;
        self.att += o.att;
        self.l1 += o.l1;
        self.giou += o.giou;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * k,
            kl_s: self.kl_s * k,
            kl_e: self.kl_e * k,
            bce: self.bce * k,
            att: self.att * k,
            l1: self.l1 * k,
            giou: self.giou * k,
        }
    }
}

/// Tape handles of the weighted loss terms.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub kl_s: Var,
    pub kl_e: Var,
    pub bce: Var,
    pub att: Var,
    pub l1: Option<Var>,
    pub giou: Option<Var>,
}

impl LossVars {
    pub fn breakdown<F: Float>(&self, tape: &Tape<F>) -> LossBreakdown {
        let v = |x: Var| tape.scalar(x).as_f64();
        LossBreakdown {
            total: v(self.total),
            kl_s: v(self.kl_s),
            kl_e: v(self.kl_e),
            bce: v(self.bce),
            att: v(self.att),
            l1: self.l1.map(v).unwrap_or(0.0),
            giou: self.giou.map(v).unwrap_or(0.0),
        }
    }
}

/// Temporal terms for every task, plus box terms over `s..=e` for VQ2D.
pub fn task_loss<F: Float>(
    tape: &mut Tape<F>,
    task: Task,
    out: &ForwardOut,
    tgt: &WindowTargets,
    w: &LossWeights,
) -> Result<LossVars> {
    let kl_s = kl_loss(tape, out.start, &tgt.p_s)?;
    let kl_s = tape.scale(kl_s, F::of(w.kl));
    let kl_e = kl_loss(tape, out.end, &tgt.p_e)?;
    let kl_e = tape.scale(kl_e, F::of(w.kl));
    let bce = foreground_bce(tape, out.foreground, &tgt.foreground)?;
    let bce = tape.scale(bce, F::of(w.fg));
    let att = guided_attention_loss(tape, &out.attention, tgt.s, tgt.e)?;
    let att = tape.scale(att, F::of(w.att));
    let mut total = tape.add(kl_s, kl_e)?;
    total = tape.add(total, bce)?;
    total = tape.add(total, att)?;

    let (mut l1, mut giou) = (None, None);
    if task == Task::Vq2d {
        let boxes = tgt
            .boxes
            .as_ref()
            .ok_or_else(|| Error::Contract("vq2d target without boxes".into()))?;
        let rows: Arc<[usize]> = (tgt.s * 4..(tgt.e + 1) * 4).collect();
        let pred = tape.gather(out.boxes, rows, &[tgt.e - tgt.s + 1, 4])?;
        let a = l1_box_loss(tape, pred, boxes)?;
        let a = tape.scale(a, F::of(w.l1));
        let g = giou_loss(tape, pred, boxes)?;
        let g = tape.scale(g, F::of(w.giou));
        total = tape.add(total, a)?;
        total = tape.add(total, g)?;
        l1 = Some(a);
        giou = Some(g);
    }
    Ok(LossVars {
        total,
        kl_s,
        kl_e,
        bce,
        att,
        l1,
        giou,
    })
}
