use std::sync::Arc;

use super::{Array, Float, Tape, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu_scalar<F: Float>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}

/// Fixed sinusoidal code, `[positions.len() × d]`.
pub fn sinusoid_table<F: Float>(positions: &[f64], d: usize) -> Array<F> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = p / 10000f64.powf(2.0 * i / d as f64);
            data.push(F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Array::new(&[positions.len(), d], data).expect("sinusoid shape")
}

/// Select entries along axis 0 (rows may repeat).
pub fn select_rows<F: Float>(tape: &mut Tape<F>, x: Var, rows: &[usize]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let Some(&n0) = shape.first() else {
        return Err(Error::Shape("select_rows on a scalar".into()));
    };
    let inner: usize = shape[1..].iter().product();
    let mut idx = Vec::with_capacity(rows.len() * inner);
    for &r in rows {
        if r >= n0 {
            return Err(Error::Shape(format!("row {r} out of range {n0}")));
        }
        idx.extend(r * inner..(r + 1) * inner);
    }
    let mut out = shape;
    out[0] = rows.len();
    tape.gather(x, idx.into(), &out)
}

/// `[B, T, h·dh] -> [B·h, T, dh]`
fn split_heads<F: Float>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut idx = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let base = (bi * t + ti) * d + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    tape.gather(x, Arc::from(idx), &[b * heads, t, dh])
}

/// `[B·h, T, dh] -> [B, T, h·dh]`
fn merge_heads<F: Float>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bh, t, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let d = heads * dh;
    let mut idx = Vec::with_capacity(bh * t * dh);
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((bi * heads + h) * t + ti) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    tape.gather(x, Arc::from(idx), &[b, t, d])
}

/// Multi-head scaled dot-product attention without projections.
///
/// `queries: [B, Tq, d]`, `keys`/`values: [B, Tk, d]` (rank-2 inputs are
/// treated as `B = 1`). The optional mask is `[Tq × Tk]`, `true` = allowed,
/// shared over the batch. Returns the output (same rank as `queries`) and
/// the weights `[B·heads, Tq, Tk]`.
pub fn attention<F: Float>(
    tape: &mut Tape<F>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(queries).to_vec();
    let rank2 = qs.len() == 2;
    let lift = |tape: &mut Tape<F>, v: Var| -> Result<Var> {
        let s = tape.shape(v).to_vec();
        match s.len() {
            2 => tape.reshape(v, &[1, s[0], s[1]]),
            3 => Ok(v),
            _ => Err(Error::Shape(format!("attention input rank {}", s.len()))),
        }
    };
    let q = lift(tape, queries)?;
    let k = lift(tape, keys)?;
    let v = lift(tape, values)?;
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    let d = sq[2];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("d={d} not divisible by heads={heads}")));
    }
    if sk != sv || sk[0] != sq[0] || sk[2] != d {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            sq, sk, sv
        )));
    }
    if let Some(m) = mask {
        if m.len() != sq[1] * sk[1] {
            return Err(Error::InvalidMask(format!(
                "mask has {} entries, expected {}x{}",
                m.len(),
                sq[1],
                sk[1]
            )));
        }
    }
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let scores = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(scores, F::of(1.0 / ((d / heads) as f64).sqrt()));
    let weights = tape.softmax_masked(scaled, mask)?;
    let ctx = tape.matmul(weights, vh)?;
    let mut out = merge_heads(tape, ctx, heads)?;
    if rank2 {
        out = tape.reshape(out, &[sq[1], d])?;
    }
    Ok((out, weights))
}
