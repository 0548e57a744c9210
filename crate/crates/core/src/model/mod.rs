//! The grounding network.
//!
//! Pipeline: patch backbone over every frame, modality-specific query
//! encoder, per-frame video-query transformer encoder (optionally on a
//! strided subset of frames, replicated back), space-time decoder over
//! learned time embeddings, and per-frame prediction heads
//! `[box(4), start logit, end logit, foreground]`.

mod checkpoint;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use params::{Bound, ParamGroup, Params};
use params::{init_array, Init};

use crate::data::{Modality, Query, TaskMap, VideoTensor};
use crate::error::{Error, Result};
use crate::tensors::{attention, select_rows, sinusoid_table, Array, Float, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Feed-forward width inside transformer layers.
    pub ff: usize,
    /// Post-backbone grid side (`H = W`).
    pub grid: usize,
    /// Raw frame side (`H_in = W_in`).
    pub input_size: usize,
    pub channels: usize,
    /// Grid side of an encoded visual query crop (`H' = W'`).
    pub query_grid: usize,
    /// Temporal stride `k` of the video-query encoder.
    pub enc_stride: usize,
    /// Training window length per task, in frames.
    pub window: TaskMap<usize>,
    pub vocab: usize,
    pub num_classes: usize,
    pub shared_time_embedding: bool,
    pub full_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 32,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff: 64,
            grid: 4,
            input_size: 16,
            channels: 3,
            query_grid: 1,
            enc_stride: 1,
            window: TaskMap {
                vq2d: 32,
                nlq: 48,
                mq: 48,
            },
            vocab: 64,
            num_classes: 12,
            shared_time_embedding: false,
            full_scale: false,
        }
    }

    /// Published hyperparameters, kept for reference. Far too large to
    /// train on a desk machine with this engine.
    pub fn full_scale() -> Self {
        Self {
            d: 256,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            ff: 2048,
            grid: 10,
            input_size: 320,
            channels: 3,
            query_grid: 4,
            enc_stride: 4,
            window: TaskMap {
                vq2d: 200,
                nlq: 400,
                mq: 400,
            },
            vocab: 50265,
            num_classes: 110,
            shared_time_embedding: false,
            full_scale: true,
        }
    }

    pub fn patch(&self) -> usize {
        self.input_size / self.grid.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch() * self.patch() * self.channels
    }

    pub fn max_window(&self) -> usize {
        self.window.vq2d.max(self.window.nlq).max(self.window.mq)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return fail(format!("d={} must be a multiple of 4", self.d));
        }
        if self.enc_stride == 0 {
            return fail("encoder stride must be >= 1".into());
        }
        if [self.window.vq2d, self.window.nlq, self.window.mq]
            .iter()
            .any(|&w| w < 2)
        {
            return fail("every task window must be >= 2 frames".into());
        }
        if self.grid == 0 || self.input_size % self.grid != 0 {
            return fail(format!(
                "input {}x{} is not divisible into a {}x{} patch grid",
                self.input_size, self.input_size, self.grid, self.grid
            ));
        }
        if self.query_grid == 0 || self.channels == 0 || self.vocab == 0 || self.num_classes == 0 {
            return fail("query_grid, channels, vocab and num_classes must be >= 1".into());
        }
        Ok(())
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = SpecList {
            v: Vec::new(),
            d: self.d,
            ff: self.ff,
        };
        let d = self.d;
        s.linear("backbone.patch", self.patch_dim(), d);
        s.push("query.visual_type", vec![d], Init::Normal(0.5));
        s.push("text.embed", vec![self.vocab, d], Init::Normal(1.0));
        s.encoder_layer("text.layer");
        s.linear("query.category", self.num_classes, d);
        for l in 0..self.enc_layers {
            s.encoder_layer(&format!("enc.{l}"));
        }
        if self.shared_time_embedding {
            s.push("time.shared", vec![d], Init::Normal(0.5));
        } else {
            s.push("time.visual", vec![d], Init::Normal(0.5));
            s.push("time.text", vec![d], Init::Normal(0.5));
        }
        for l in 0..self.dec_layers {
            let p = format!("dec.{l}");
            s.attention(&format!("{p}.self"));
            s.norm(&format!("{p}.ln1"));
            s.attention(&format!("{p}.cross"));
            s.norm(&format!("{p}.ln2"));
            s.feed_forward(&p);
            s.norm(&format!("{p}.ln3"));
        }
        s.linear("head.box.0", d, d);
        s.linear("head.box.1", d, d);
        s.linear("head.box.2", d, 4);
        s.linear("head.time", d, 2);
        s.linear("head.fg", d, 1);
        s.v
    }

    /// Freshly initialised parameters.
    pub fn init_params(&self, seed: u64) -> Result<Params<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        for (name, shape, init) in self.param_specs() {
            let a = init_array(&shape, init, &mut rng);
            p.insert(name, a)?;
        }
        Ok(p)
    }
}

struct SpecList {
    v: Vec<(String, Vec<usize>, Init)>,
    d: usize,
    ff: usize,
}

impl SpecList {
    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.v.push((name.to_string(), shape, init));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(
            &format!("{name}.w"),
            vec![fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        );
        self.push(&format!("{name}.b"), vec![fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str) {
        self.push(&format!("{name}.g"), vec![self.d], Init::Ones);
        self.push(&format!("{name}.b"), vec![self.d], Init::Zeros);
    }

    fn attention(&mut self, name: &str) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), self.d, self.d);
        }
    }

    fn feed_forward(&mut self, name: &str) {
        self.linear(&format!("{name}.ffn1"), self.d, self.ff);
        self.linear(&format!("{name}.ffn2"), self.ff, self.d);
    }

    fn encoder_layer(&mut self, name: &str) {
        self.attention(&format!("{name}.attn"));
        self.norm(&format!("{name}.ln1"));
        self.feed_forward(name);
        self.norm(&format!("{name}.ln2"));
    }
}

/// Per-frame outputs over a window or a whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictions {
    pub boxes: Vec<[f64; 4]>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub foreground: Vec<f64>,
}

impl FramePredictions {
    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }

    pub fn zeros(t: usize) -> Self {
        Self {
            boxes: vec![[0.0; 4]; t],
            start_logits: vec![0.0; t],
            end_logits: vec![0.0; t],
            foreground: vec![0.0; t],
        }
    }

    /// The 7-vector of frame `t`.
    pub fn row(&self, t: usize) -> [f64; 7] {
        let b = self.boxes[t];
        [
            b[0],
            b[1],
            b[2],
            b[3],
            self.start_logits[t],
            self.end_logits[t],
            self.foreground[t],
        ]
    }

    pub fn set_row(&mut self, t: usize, r: [f64; 7]) {
        self.boxes[t] = [r[0], r[1], r[2], r[3]];
        self.start_logits[t] = r[4];
        self.end_logits[t] = r[5];
        self.foreground[t] = r[6];
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[T, 4]` sigmoid boxes.
    pub boxes: Var,
    /// `[T]`
    pub start: Var,
    /// `[T]`
    pub end: Var,
    /// `[T]` sigmoid foreground.
    pub foreground: Var,
    /// Temporal self-attention weights per decoder layer, `[heads, T, T]`.
    pub attention: Vec<Var>,
}

impl ForwardOut {
    pub fn predictions<F: Float>(&self, tape: &Tape<F>) -> FramePredictions {
        let b = tape.data(self.boxes);
        FramePredictions {
            boxes: b
                .chunks(4)
                .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64(), c[3].as_f64()])
                .collect(),
            start_logits: tape.data(self.start).iter().map(|v| v.as_f64()).collect(),
            end_logits: tape.data(self.end).iter().map(|v| v.as_f64()).collect(),
            foreground: tape.data(self.foreground).iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn attention_maps<F: Float>(&self, tape: &Tape<F>) -> Vec<Array<F>> {
        self.attention.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

/// Model configuration plus trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params<f32>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = cfg.init_params(seed)?;
        Ok(Self { cfg, params })
    }

    /// Inference-only forward in 32-bit.
    pub fn predict(&self, window: &VideoTensor, query: &Query) -> Result<FramePredictions> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let out = forward(&self.cfg, &mut tape, &p, window, query)?;
        Ok(out.predictions(&tape))
    }
}

// ---- preprocessing ----------------------------------------------------------

/// Splits `[T, S, S, C]` frames into `[T·G·G, P·P·C]` patch rows.
pub fn patchify(frames: &[f32], t: usize, size: usize, channels: usize, grid: usize) -> Vec<f32> {
    let p = size / grid;
    let mut out = Vec::with_capacity(frames.len());
    for ti in 0..t {
        let base = ti * size * size * channels;
        for gr in 0..grid {
            for gc in 0..grid {
                for py in 0..p {
                    let y = gr * p + py;
                    let row = base + (y * size + gc * p) * channels;
                    out.extend_from_slice(&frames[row..row + p * channels]);
                }
            }
        }
    }
    out
}

/// Bilinear resampling of an `[h, w, c]` grid (pixel-centre aligned).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; oh * ow * c];
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f32)
    };
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// 2-D sinusoidal code for a `grid × grid` map, `[grid², d]`: the first
/// half of the channels encodes the row, the second half the column.
pub fn positional_2d<F: Float>(grid: usize, d: usize) -> Array<F> {
    let half = d / 2;
    let rows: Vec<f64> = (0..grid).map(|v| v as f64).collect();
    let code = sinusoid_table::<F>(&rows, half);
    let mut data = Vec::with_capacity(grid * grid * d);
    for r in 0..grid {
        for c in 0..grid {
            data.extend_from_slice(&code.data()[r * half..(r + 1) * half]);
            data.extend_from_slice(&code.data()[c * half..(c + 1) * half]);
        }
    }
    Array::new(&[grid * grid, d], data).expect("2d code shape")
}

// ---- layers -----------------------------------------------------------------

fn linear<F: Float>(tape: &mut Tape<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w"))?)?;
    tape.add_bias(y, p.var(&format!("{name}.b"))?)
}

fn layer_norm<F: Float>(tape: &mut Tape<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.var(&format!("{name}.g"))?, p.var(&format!("{name}.b"))?)
}

fn multi_head<F: Float>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &ModelConfig,
    name: &str,
    xq: Var,
    xkv: Var,
) -> Result<(Var, Var)> {
    let q = linear(tape, p, &format!("{name}.q"), xq)?;
    let k = linear(tape, p, &format!("{name}.k"), xkv)?;
    let v = linear(tape, p, &format!("{name}.v"), xkv)?;
    let (ctx, w) = attention(tape, q, k, v, cfg.heads, None)?;
    Ok((linear(tape, p, &format!("{name}.o"), ctx)?, w))
}

fn feed_forward<F: Float>(tape: &mut Tape<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.ffn1"), x)?;
    let h = tape.gelu(h);
    linear(tape, p, &format!("{name}.ffn2"), h)
}

/// Post-norm transformer encoder layer over `[B, N, d]`.
fn encoder_layer<F: Float>(
    tape: &mut Tape<F>,
    p: &Bound,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
) -> Result<Var> {
    let (a, _) = multi_head(tape, p, cfg, &format!("{name}.attn"), x, x)?;
    let x = tape.add(x, a)?;
    let x = layer_norm(tape, p, &format!("{name}.ln1"), x)?;
    let f = feed_forward(tape, p, name, x)?;
    let x = tape.add(x, f)?;
    layer_norm(tape, p, &format!("{name}.ln2"), x)
}

// ---- pipeline stages ----------------------------------------------------------

/// Patch backbone: `[T, H_in, W_in, C]` → `[T, H·W, d]`.
pub fn encode_video<F: Float>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    p: &Bound,
    frames: &VideoTensor,
) -> Result<Var> {
    let s = frames.frames.shape();
    if s[1] != cfg.input_size || s[2] != cfg.input_size || s[3] != cfg.channels {
        return Err(Error::Config(format!(
            "frame grid {:?} does not match configured {}x{}x{}",
            &s[1..],
            cfg.input_size,
            cfg.input_size,
            cfg.channels
        )));
    }
    cfg.validate()?;
    let t = s[0];
    let hw = cfg.grid * cfg.grid;
    let patches = patchify(frames.frames.data(), t, cfg.input_size, cfg.channels, cfg.grid);
    let patches = Array::new(
        &[t * hw, cfg.patch_dim()],
        patches.iter().map(|&v| F::of(v as f64)).collect(),
    )?;
    let x = tape.constant(patches);
    let x = linear(tape, p, "backbone.patch", x)?;
    let x = tape.reshape(x, &[t, hw * cfg.d])?;
    let pos = tape.constant(positional_2d::<F>(cfg.grid, cfg.d).reshape(&[hw * cfg.d])?);
    let x = tape.add_bias(x, pos)?;
    tape.reshape(x, &[t, hw, cfg.d])
}

/// Modality-specific query encoder → `[L, d]`.
pub fn encode_query<F: Float>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    p: &Bound,
    query: &Query,
) -> Result<Var> {
    let d = cfg.d;
    match query {
        Query::Visual { crop } => {
            let s = &crop.shape;
            if s.len() != 3 || s[2] != cfg.channels || s[0] == 0 || s[1] == 0 {
                return Err(Error::InvalidQuery(format!(
                    "visual crop must be h x w x {}, got {:?}",
                    cfg.channels, s
                )));
            }
            if crop.data.len() != s.iter().product::<usize>() {
                return Err(Error::InvalidQuery("crop data does not match its shape".into()));
            }
            let side = cfg.query_grid * cfg.patch();
            let img = resize_bilinear(&crop.data, s[0], s[1], s[2], side, side);
            let n = cfg.query_grid * cfg.query_grid;
            let patches = patchify(&img, 1, side, cfg.channels, cfg.query_grid);
            let x = tape.constant(Array::new(
                &[n, cfg.patch_dim()],
                patches.iter().map(|&v| F::of(v as f64)).collect(),
            )?);
            let x = linear(tape, p, "backbone.patch", x)?;
            let pos = tape.constant(positional_2d::<F>(cfg.query_grid, d));
            let x = tape.add(x, pos)?;
            tape.add_bias(x, p.var("query.visual_type")?)
        }
        Query::Text { tokens } => {
            if tokens.is_empty() {
                return Err(Error::InvalidQuery("empty token sequence".into()));
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
                return Err(Error::InvalidQuery(format!(
                    "token {bad} outside vocabulary of {}",
                    cfg.vocab
                )));
            }
            let l = tokens.len();
            let emb = select_rows(tape, p.var("text.embed")?, tokens)?;
            let positions: Vec<f64> = (0..l).map(|v| v as f64).collect();
            let pos = tape.constant(sinusoid_table::<F>(&positions, d));
            let x = tape.add(emb, pos)?;
            let x = tape.reshape(x, &[1, l, d])?;
            let x = encoder_layer(tape, p, cfg, "text.layer", x)?;
            tape.reshape(x, &[l, d])
        }
        Query::Category { class } => {
            if *class >= cfg.num_classes {
                return Err(Error::InvalidQuery(format!(
                    "class {class} outside {} classes",
                    cfg.num_classes
                )));
            }
            let mut onehot = Array::zeros(&[1, cfg.num_classes]);
            onehot.data_mut()[*class] = F::one();
            let x = tape.constant(onehot);
            linear(tape, p, "query.category", x)
        }
    }
}

/// Frame indices the strided encoder runs on, and the source row used for
/// every output frame (nearest-neighbour replication).
pub fn stride_plan(t: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let k = k.max(1);
    let selected: Vec<usize> = (0..t).step_by(k).collect();
    let source: Vec<usize> = (0..t).map(|i| i / k).collect();
    (selected, source)
}

/// Per-frame fusion of `[T, HW, d]` video features with `[L, d]` query
/// features → `[T, HW + L, d]`.
pub fn video_query_encode<F: Float>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    p: &Bound,
    v: Var,
    q: Var,
) -> Result<Var> {
    let vs = tape.shape(v).to_vec();
    let qs = tape.shape(q).to_vec();
    if vs.len() != 3 || qs.len() != 2 || vs[2] != qs[1] {
        return Err(Error::Shape(format!("video {:?} with query {:?}", vs, qs)));
    }
    let (t, hw, d) = (vs[0], vs[1], vs[2]);
    let l = qs[0];
    let (selected, source) = stride_plan(t, cfg.enc_stride);
    let ts = selected.len();
    let vsel = if ts == t {
        v
    } else {
        select_rows(tape, v, &selected)?
    };
    let qidx: Vec<usize> = (0..ts).flat_map(|_| 0..l * d).collect();
    let qrep = tape.gather(q, Arc::from(qidx), &[ts, l, d])?;
    let mut x = tape.concat(&[vsel, qrep], 1)?;
    for layer in 0..cfg.enc_layers {
        x = encoder_layer(tape, p, cfg, &format!("enc.{layer}"), x)?;
    }
    if ts == t {
        Ok(x)
    } else {
        let _ = hw;
        select_rows(tape, x, &source)
    }
}

/// Factorised space-time decoder. Returns refined time embeddings `[T, d]`
/// and the temporal self-attention weights of every layer.
pub fn space_time_decode<F: Float>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    p: &Bound,
    enc: Var,
    modality: Modality,
) -> Result<(Var, Vec<Var>)> {
    let es = tape.shape(enc).to_vec();
    if es.len() != 3 || es[2] != cfg.d {
        return Err(Error::Shape(format!("encoder output {:?}", es)));
    }
    let (t, n, d) = (es[0], es[1], es[2]);
    let vec_name = if cfg.shared_time_embedding {
        "time.shared"
    } else {
        match modality {
            Modality::Visual => "time.visual",
            Modality::Text => "time.text",
        }
    };
    let positions: Vec<f64> = (0..t).map(|v| v as f64).collect();
    let sin = tape.constant(sinusoid_table::<F>(&positions, d));
    let mut e = tape.add_bias(sin, p.var(vec_name)?)?;
    let mut maps = Vec::with_capacity(cfg.dec_layers);
    for layer in 0..cfg.dec_layers {
        let name = format!("dec.{layer}");
        let x = tape.reshape(e, &[1, t, d])?;
        let (a, w) = multi_head(tape, p, cfg, &format!("{name}.self"), x, x)?;
        maps.push(w);
        let x = tape.add(x, a)?;
        let x = layer_norm(tape, p, &format!("{name}.ln1"), x)?;
        // frame-wise cross-attention: embedding t only sees enc[t]
        let xq = tape.reshape(x, &[t, 1, d])?;
        let (c, _) = multi_head(tape, p, cfg, &format!("{name}.cross"), xq, enc)?;
        let x = tape.add(xq, c)?;
        let x = layer_norm(tape, p, &format!("{name}.ln2"), x)?;
        let f = feed_forward(tape, p, &name, x)?;
        let x = tape.add(x, f)?;
        let x = layer_norm(tape, p, &format!("{name}.ln3"), x)?;
        e = tape.reshape(x, &[t, d])?;
    }
    let _ = n;
    Ok((e, maps))
}

/// Prediction heads over `[T, d]` refined embeddings.
pub fn predict_heads<F: Float>(tape: &mut Tape<F>, p: &Bound, e: Var) -> Result<ForwardOut> {
    let t = tape.shape(e)[0];
    let h = linear(tape, p, "head.box.0", e)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, "head.box.1", h)?;
    let h = tape.gelu(h);
    let b = linear(tape, p, "head.box.2", h)?;
    let boxes = tape.sigmoid(b);

    let tl = linear(tape, p, "head.time", e)?;
    let start = tape.gather(tl, (0..t).map(|i| 2 * i).collect(), &[t])?;
    let end = tape.gather(tl, (0..t).map(|i| 2 * i + 1).collect(), &[t])?;

    let f = linear(tape, p, "head.fg", e)?;
    let f = tape.reshape(f, &[t])?;
    let foreground = tape.sigmoid(f);
    Ok(ForwardOut {
        boxes,
        start,
        end,
        foreground,
        attention: Vec::new(),
    })
}

/// Full forward pass over one window.
pub fn forward<F: Float>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    p: &Bound,
    window: &VideoTensor,
    query: &Query,
) -> Result<ForwardOut> {
    let v = encode_video(cfg, tape, p, window)?;
    let q = encode_query(cfg, tape, p, query)?;
    let enc = video_query_encode(cfg, tape, p, v, q)?;
    let (e, maps) = space_time_decode(cfg, tape, p, enc, query.modality())?;
    let mut out = predict_heads(tape, p, e)?;
    out.attention = maps;
    Ok(out)
}

#[cfg(test)]
mod tests;
