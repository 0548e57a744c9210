use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Array, Float};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds. Used for reporting and for the
/// negative-control corruption switch of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    AddBias,
    MulBias,
    Scale,
    Offset,
    Abs,
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Clamp,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Sum,
    Mean,
    Gather,
    Concat,
    Reshape,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Max,
        OpKind::Min,
        OpKind::AddBias,
        OpKind::MulBias,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::Abs,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Clamp,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Max => "max",
            OpKind::Min => "min",
            OpKind::AddBias => "add_bias",
            OpKind::MulBias => "mul_bias",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Abs => "abs",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Abs,
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        b_transposed: bool,
    },
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Unary(Unary, Var),
    Clamp(Var, F, F),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    Gather(Var, Arc<[usize]>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape(Var),
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary(b, ..) => match b {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
                Binary::Max => OpKind::Max,
                Binary::Min => OpKind::Min,
            },
            Op::AddBias(..) => OpKind::AddBias,
            Op::MulBias(..) => OpKind::MulBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Unary(u, _) => match u {
                Unary::Abs => OpKind::Abs,
                Unary::Gelu => OpKind::Gelu,
                Unary::Relu => OpKind::Relu,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Exp => OpKind::Exp,
                Unary::Log => OpKind::Log,
            },
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Gather(..) => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

struct Node<F> {
    value: Array<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of executed ops. Backward walks it in exact reverse order.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    corrupt: Option<OpKind>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient for `v`; zeros when `v` is not on the path to the loss.
    pub fn get(&self, v: Var) -> Array<F> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Array::new(shape, g.clone()).expect("gradient shape"),
            None => Array::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Array<F> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Array::new(&shape, g).expect("gradient shape"),
            None => Array::zeros(&shape),
        }
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            corrupt: None,
        }
    }

    /// Deliberately breaks the backward rule of one op kind (its
    /// propagated gradient is scaled by 1.5). Negative control for the
    /// gradient checker.
    pub fn with_corruption(mut self, kind: Option<OpKind>) -> Self {
        self.corrupt = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product.
    ///
    /// * `b` rank 2 `[k, n]`: `a` is any array whose last axis is `k`; the
    ///   leading axes are treated as rows.
    /// * `b` rank 3 `[B, k, n]`: `a` must be `[B, m, k]` (batched product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` with `a: [B, m, k]`, `b: [B, n, k]` (or 2-D variants).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, b_shared, out_shape) = match sb.len() {
            2 => {
                let (kb, n) = if b_transposed {
                    (sb[1], sb[0])
                } else {
                    (sb[0], sb[1])
                };
                let k = *sa.last().unwrap_or(&0);
                if sa.is_empty() || k != kb {
                    return shape_err(format!("matmul inner dims: {:?} x {:?}", sa, sb));
                }
                let m = self.value(a).len() / k.max(1);
                let mut out = sa[..sa.len() - 1].to_vec();
                out.push(n);
                (1, m, k, n, true, out)
            }
            3 => {
                let (kb, n) = if b_transposed {
                    (sb[2], sb[1])
                } else {
                    (sb[1], sb[2])
                };
                if sa.len() != 3 || sa[0] != sb[0] || sa[2] != kb {
                    return shape_err(format!("batched matmul: {:?} x {:?}", sa, sb));
                }
                (sa[0], sa[1], sa[2], n, false, vec![sa[0], sa[1], n])
            }
            _ => return shape_err(format!("matmul rhs must be rank 2 or 3, got {:?}", sb)),
        };
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let aslice = &ad[bi * m * k..(bi + 1) * m * k];
                let bslice = if b_shared {
                    bd
                } else {
                    &bd[bi * k * n..(bi + 1) * k * n]
                };
                let c = &mut out[bi * m * n..(bi + 1) * m * n];
                if b_transposed {
                    gemm_nt(aslice, bslice, c, m, k, n);
                } else {
                    gemm_nn(aslice, bslice, c, m, k, n);
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Array::new(&out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                b_transposed,
            },
            needs,
        ))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{:?}: {:?} vs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            ));
        }
        let av = self.data(a);
        let bv = self.data(b);
        let data: Vec<F> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Max => x.max(y),
                Binary::Min => x.min(y),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(&shape, data)?, Op::Binary(op, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    fn check_bias(&self, x: Var, b: Var) -> Result<usize> {
        let n = self.value(x).last_dim();
        if self.value(b).len() != n {
            return shape_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        Ok(n)
    }

    /// `x[..., n] + b[n]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.check_bias(x, b)?;
        let bv = self.data(b);
        let data: Vec<F> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x) || self.ng(b);
        Ok(self.push(Array::new(&shape, data)?, Op::AddBias(x, b), needs))
    }

    /// `x[..., n] * g[n]`
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.check_bias(x, g)?;
        let gv = self.data(g);
        let data: Vec<F> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x) || self.ng(g);
        Ok(self.push(Array::new(&shape, data)?, Op::MulBias(x, g), needs))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Array::new(&shape, data).unwrap(), Op::Scale(x, s), needs)
    }

    pub fn offset(&mut self, x: Var, c: F) -> Var {
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Array::new(&shape, data).unwrap(), Op::Offset(x), needs)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| match op {
                Unary::Abs => v.abs(),
                Unary::Gelu => super::nn::gelu_scalar(v),
                Unary::Relu => v.max(F::zero()),
                Unary::Sigmoid => sigmoid(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Array::new(&shape, data).unwrap(), Op::Unary(op, x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Array::new(&shape, data).unwrap(), Op::Clamp(x, lo, hi), needs)
    }

    // ---- normalisations -----------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None).expect("unmasked softmax")
    }

    /// Softmax over the last axis where `mask[r * n + j] == false` entries
    /// get zero weight. The mask has `rows * n` entries and repeats over
    /// the leading elements of `x`.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(x).last_dim();
        if let Some(m) = mask {
            if m.is_empty() || m.len() % n != 0 {
                return Err(Error::InvalidMask(format!(
                    "mask of {} entries for last axis {}",
                    m.len(),
                    n
                )));
            }
        }
        let xv = self.data(x);
        let mut out = vec![F::zero(); xv.len()];
        for (r, (row, orow)) in xv.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mrow = mask.map(|m| {
                let rows = m.len() / n;
                let mr = r % rows;
                &m[mr * n..(mr + 1) * n]
            });
            let allowed = |j: usize| mrow.map_or(true, |m| m[j]);
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                if row.iter().enumerate().any(|(j, v)| allowed(j) && v.is_nan()) {
                    orow.iter_mut().for_each(|o| *o = F::nan());
                    continue;
                }
                return Err(Error::InvalidMask(format!("row {r} is fully masked")));
            }
            let mut s = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    s += e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / s;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        Ok(self.push(Array::new(&shape, out)?, Op::Softmax(x), needs))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let xv = self.data(x);
        let mut out = vec![F::zero(); xv.len()];
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(Array::new(&shape, out).unwrap(), Op::LogSoftmax(x), needs)
    }

    /// Layer normalisation over the last axis with ε = 1e-5 inside the root.
    /// A constant row normalises to zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.check_bias(x, gain)?;
        self.check_bias(x, bias)?;
        let eps = F::of(1e-5);
        let nf = F::of(n as f64);
        let xv = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xv.len() / n;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Array::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Array::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / F::of(v.len().max(1) as f64);
        let needs = self.ng(x);
        self.push(Array::scalar(s), Op::Mean(x), needs)
    }

    // ---- indexing -------------------------------------------------------------

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.data(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return shape_err(format!("gather index {bad} out of range {}", xv.len()));
        }
        let data: Vec<F> = idx.iter().map(|&i| xv[i]).collect();
        let arr = Array::new(shape, data)?;
        let needs = self.ng(x);
        Ok(self.push(arr, Op::Gather(x, idx), needs))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} for rank {}", first.len()));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err(format!("concat {:?} with {:?}", first, s));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Array::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let arr = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(arr, Op::Reshape(x), needs))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.corrupt == Some(node.op.kind()) {
                for v in g.iter_mut() {
                    *v = *v * F::of(1.5);
                }
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// d(loss)/d(param) for each param (zeros when not on the path).
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Array<F>>> {
        let mut g = self.backward(loss)?;
        Ok(params.iter().map(|&p| g.take(p)).collect())
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                b_transposed,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if let Some(ga) = self.buf(grads, a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = if b_shared {
                            bd
                        } else {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        };
                        let c = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if b_transposed {
                            gemm_nn(gs, bs, c, m, n, k);
                        } else {
                            gemm_nt(gs, bs, c, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let c = if b_shared {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        if b_transposed {
                            gemm_tn(gs, as_, c, n, m, k);
                        } else {
                            gemm_tn(as_, gs, c, k, m, n);
                        }
                    }
                }
            }
            &Op::Binary(op, a, b) => {
                let av = self.data(a);
                let bv = self.data(b);
                if let Some(ga) = self.buf(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i]
                            * match op {
                                Binary::Add | Binary::Sub => F::one(),
                                Binary::Mul => bv[i],
                                Binary::Div => F::one() / bv[i],
                                Binary::Max => sel(av[i] >= bv[i]),
                                Binary::Min => sel(av[i] <= bv[i]),
                            };
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i]
                            * match op {
                                Binary::Add => F::one(),
                                Binary::Sub => -F::one(),
                                Binary::Mul => av[i],
                                Binary::Div => -av[i] / (bv[i] * bv[i]),
                                Binary::Max => sel(av[i] < bv[i]),
                                Binary::Min => sel(av[i] > bv[i]),
                            };
                    }
                }
            }
            &Op::AddBias(x, b) => {
                let n = self.value(b).len();
                if let Some(gx) = self.buf(grads, x) {
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for row in g.chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            &Op::MulBias(x, s) => {
                let n = self.value(s).len();
                let xv = self.data(x);
                let sv = self.data(s);
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sv[i % n];
                    }
                }
                if let Some(gs) = self.buf(grads, s) {
                    for i in 0..g.len() {
                        gs[i % n] += g[i] * xv[i];
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.buf(grads, x) {
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v * s;
                    }
                }
            }
            &Op::Offset(x) | &Op::Reshape(x) => {
                if let Some(gx) = self.buf(grads, x) {
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            &Op::Unary(op, x) => {
                let xv = self.data(x);
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..g.len() {
                        let d = match op {
                            Unary::Abs => {
                                if xv[i] > F::zero() {
                                    F::one()
                                } else if xv[i] < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Gelu => super::nn::gelu_grad(xv[i]),
                            Unary::Relu => sel(xv[i] > F::zero()),
                            Unary::Sigmoid => y[i] * (F::one() - y[i]),
                            Unary::Exp => y[i],
                            Unary::Log => F::one() / xv[i],
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            &Op::Clamp(x, lo, hi) => {
                let xv = self.data(x);
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..g.len() {
                        if xv[i] >= lo && xv[i] <= hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.buf(grads, x) {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.buf(grads, x) {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let gs: F = gr.iter().copied().sum();
                        for j in 0..n {
                            gxr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.last_dim();
                let gv = self.data(*gain);
                if let Some(gg) = self.buf(grads, *gain) {
                    for i in 0..g.len() {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for i in 0..g.len() {
                        gb[i % n] += g[i];
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let nf = F::of(n as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = r * n;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..n {
                            let dh = g[o + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[o + j];
                        }
                        for j in 0..n {
                            let dh = g[o + j] * gv[j];
                            gx[o + j] += rs * (dh - s1 / nf - xhat[o + j] * s2 / nf);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                let len = self.value(x).len().max(1);
                if let Some(gx) = self.buf(grads, x) {
                    let d = g[0] / F::of(len as f64);
                    for a in gx.iter_mut() {
                        *a += d;
                    }
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (&i, &v) in idx.iter().zip(g) {
                        gx[i] += v;
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.buf(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * row + off..o * row + off + w];
                            for (a, &v) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    off += w;
                }
            }
        }
    }
}

#[inline]
fn sel<F: Float>(b: bool) -> F {
    if b {
        F::one()
    } else {
        F::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
