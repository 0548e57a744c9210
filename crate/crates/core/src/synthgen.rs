//! Seeded synthetic episodes: noise videos with planted concept patterns
//! moving along linear trajectories, annotated for all three tasks.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, BoxCxCyWh, GridData, Query, Segment, Task, VideoTensor};
use crate::error::{Error, Result};
use crate::tensors::Array;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"VGT1";
const MAX_RETRIES: usize = 100;
const MAX_BANK_DRAWS: usize = 10_000;
const MAX_CORRELATION: f64 = 0.5;

/// Word ids of the query templates. Concept `c` is token `CONCEPT_TOKEN0 + c`.
pub mod vocab {
    pub const WHERE: usize = 1;
    pub const IS: usize = 2;
    pub const WHEN: usize = 3;
    pub const DID: usize = 4;
    pub const I: usize = 5;
    pub const DO: usize = 6;
    pub const CONCEPT_TOKEN0: usize = 10;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_concepts: usize,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub frame_size: usize,
    pub channels: usize,
    /// Side of a concept pattern; positions are snapped to this grid.
    pub pattern_size: usize,
    pub noise_sigma: f64,
    pub max_distractors: usize,
    pub max_mq_instances: usize,
    /// MQ queries as class indices instead of token phrases.
    pub mq_category_queries: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_concepts: 12,
            train_episodes: 200,
            val_episodes: 50,
            t_min: 64,
            t_max: 256,
            frame_size: 16,
            channels: 3,
            pattern_size: 4,
            noise_sigma: 0.1,
            max_distractors: 2,
            max_mq_instances: 4,
            mq_category_queries: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_concepts < 2 {
            return fail("need at least 2 concepts");
        }
        if self.num_concepts + vocab::CONCEPT_TOKEN0 > 64 * 1024 {
            return fail("too many concepts");
        }
        if self.t_min < 16 || self.t_max < self.t_min {
            return fail("video length range must satisfy 16 <= t_min <= t_max");
        }
        if self.pattern_size == 0 || self.frame_size % self.pattern_size != 0 {
            return fail("frame_size must be a multiple of pattern_size");
        }
        if self.channels == 0 || !(self.noise_sigma >= 0.0) {
            return fail("channels must be >= 1 and noise_sigma >= 0");
        }
        if self.max_mq_instances == 0 {
            return fail("max_mq_instances must be >= 1");
        }
        Ok(())
    }

    pub fn tokens_needed(&self) -> usize {
        vocab::CONCEPT_TOKEN0 + self.num_concepts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    pub pattern_size: usize,
    pub channels: usize,
    /// `[p, p, c]` patterns, row-major.
    pub patterns: Vec<Vec<f32>>,
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt().max(1e-12)
}

impl ConceptBank {
    pub fn concept_phrase(c: usize, task: Task) -> Vec<usize> {
        use vocab::*;
        match task {
            Task::Mq => vec![WHEN, DID, I, DO, CONCEPT_TOKEN0 + c],
            _ => vec![WHERE, IS, CONCEPT_TOKEN0 + c],
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn max_abs_correlation(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                m = m.max(correlation(&self.patterns[i], &self.patterns[j]).abs());
            }
        }
        m
    }
}

/// `c` i.i.d. standard-normal patterns, redrawn until every pair has
/// |correlation| < 0.5.
pub fn make_concept_bank(c: usize, pattern_size: usize, channels: usize, seed: u64) -> Result<ConceptBank> {
    if c < 2 {
        return Err(Error::Config(format!("concept bank needs C >= 2, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let n = pattern_size * pattern_size * channels;
    let mut patterns: Vec<Vec<f32>> = Vec::with_capacity(c);
    let mut draws = 0;
    while patterns.len() < c {
        draws += 1;
        if draws > MAX_BANK_DRAWS {
            return Err(Error::Generation(
                "could not draw decorrelated concept patterns".into(),
            ));
        }
        let p: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        if patterns
            .iter()
            .all(|q| correlation(&p, q).abs() < MAX_CORRELATION)
        {
            patterns.push(p);
        }
    }
    Ok(ConceptBank {
        pattern_size,
        channels,
        patterns,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Vq2d,
    Nlq,
    Mq,
    Distractor,
}

/// One planted appearance of a concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub concept: usize,
    pub role: Role,
    pub segment: Segment,
    /// Top-left pixel of the pattern at the first and last frame.
    pub from: [usize; 2],
    pub to: [usize; 2],
    pub boxes: Vec<BoxCxCyWh>,
}

impl Occurrence {
    /// Top-left pixel `(x, y)` at frame `t` of the segment.
    pub fn position(&self, t: usize, pattern_size: usize) -> (usize, usize) {
        let [s, e] = self.segment;
        let f = if e == s {
            0.0
        } else {
            (t - s) as f64 / (e - s) as f64
        };
        let lerp = |a: usize, b: usize| {
            let cell = (a as f64 + (b as f64 - a as f64) * f) / pattern_size as f64;
            cell.round() as usize * pattern_size
        };
        (lerp(self.from[0], self.to[0]), lerp(self.from[1], self.to[1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            o => Err(Error::Config(format!("unknown split `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub split: Split,
    pub video: VideoTensor,
    pub occurrences: Vec<Occurrence>,
    pub annotations: Vec<Annotation>,
}

fn box_of(x: usize, y: usize, p: usize, size: usize) -> BoxCxCyWh {
    let s = size as f64;
    [
        (x as f64 + p as f64 / 2.0) / s,
        (y as f64 + p as f64 / 2.0) / s,
        p as f64 / s,
        p as f64 / s,
    ]
}

fn render_noise(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Lays out occurrence lengths in random order with random gaps; the last
/// frame (the visual query frame) is always left free.
fn place(rng: &mut ChaCha8Rng, t: usize, lens: &[usize]) -> Option<Vec<Segment>> {
    let n = lens.len();
    let used: usize = lens.iter().sum::<usize>() + n.saturating_sub(1) + 1;
    if used > t {
        return None;
    }
    let free = t - used;
    // random composition of `free` into n + 1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![[0, 0]; n];
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (k, &i) in order.iter().enumerate() {
        cursor += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        out[i] = [cursor, cursor + lens[i] - 1];
        cursor += lens[i] + 1;
    }
    Some(out)
}

/// One annotated episode; `index` selects an independent RNG stream.
pub fn generate_episode(
    bank: &ConceptBank,
    cfg: &GenConfig,
    seed: u64,
    index: u64,
    split: Split,
) -> Result<Episode> {
    cfg.validate()?;
    if bank.len() < 3 {
        return Err(Error::Config(
            "episodes need at least 3 concepts (one per task)".into(),
        ));
    }
    if bank.pattern_size != cfg.pattern_size || bank.channels != cfg.channels {
        return Err(Error::Config("concept bank does not match generator config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let p = cfg.pattern_size;
    let cells = cfg.frame_size / p;
    let t = rng.random_range(cfg.t_min..=cfg.t_max);

    let mut concepts: Vec<usize> = (0..bank.len()).collect();
    concepts.shuffle(&mut rng);
    let n_distract = cfg.max_distractors.min(bank.len() - 3);
    let n_distract = rng.random_range(0..=n_distract);
    let (cv, cn, cm) = (concepts[0], concepts[1], concepts[2]);

    let pct = |f: f64| ((f * t as f64).round() as usize).max(1);
    let mut placed = None;
    for _ in 0..MAX_RETRIES {
        let mut plan: Vec<(usize, Role, usize)> = Vec::new();
        let short = pct(0.05).max(2);
        for _ in 0..rng.random_range(1..=2) {
            let len = (short as i64 + rng.random_range(-1..=2)).max(2) as usize;
            plan.push((cv, Role::Vq2d, len));
        }
        let (lo, hi) = (pct(0.03).max(3), pct(0.08).max(4));
        plan.push((cn, Role::Nlq, rng.random_range(lo..=hi)));
        let (mlo, mhi) = (pct(0.08).max(3), pct(0.15).max(4));
        for _ in 0..rng.random_range(1..=cfg.max_mq_instances) {
            plan.push((cm, Role::Mq, rng.random_range(mlo..=mhi)));
        }
        for &c in concepts.iter().skip(3).take(n_distract) {
            plan.push((c, Role::Distractor, rng.random_range(lo..=hi)));
        }
        let lens: Vec<usize> = plan.iter().map(|x| x.2).collect();
        if let Some(segs) = place(&mut rng, t, &lens) {
            placed = Some((plan, segs));
            break;
        }
    }
    let (plan, segs) = placed.ok_or_else(|| {
        Error::Generation(format!("episode {index}: no feasible placement in {t} frames"))
    })?;

    let mut occurrences = Vec::with_capacity(plan.len());
    for ((concept, role, _), seg) in plan.into_iter().zip(segs) {
        let cell = |rng: &mut ChaCha8Rng| [rng.random_range(0..cells) * p, rng.random_range(0..cells) * p];
        let from = cell(&mut rng);
        let to = cell(&mut rng);
        let mut occ = Occurrence {
            concept,
            role,
            segment: seg,
            from,
            to,
            boxes: Vec::new(),
        };
        occ.boxes = (seg[0]..=seg[1])
            .map(|f| {
                let (x, y) = occ.position(f, p);
                box_of(x, y, p, cfg.frame_size)
            })
            .collect();
        occurrences.push(occ);
    }
    occurrences.sort_by_key(|o| o.segment[0]);

    let frame_len = cfg.frame_size * cfg.frame_size * cfg.channels;
    let mut frames = render_noise(&mut rng, t * frame_len, cfg.noise_sigma);
    for occ in &occurrences {
        let pat = &bank.patterns[occ.concept];
        for f in occ.segment[0]..=occ.segment[1] {
            let (x, y) = occ.position(f, p);
            let base = f * frame_len;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..cfg.channels {
                        let idx = base + ((y + py) * cfg.frame_size + x + px) * cfg.channels + ch;
                        frames[idx] += pat[(py * p + px) * cfg.channels + ch];
                    }
                }
            }
        }
    }
    let video = VideoTensor::new(Array::new(
        &[t, cfg.frame_size, cfg.frame_size, cfg.channels],
        frames,
    )?)?;

    let prefix = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let id = format!("{prefix}-{index:05}");
    let mut annotations = Vec::with_capacity(3);

    let vq = occurrences
        .iter()
        .filter(|o| o.role == Role::Vq2d)
        .max_by_key(|o| o.segment[1])
        .expect("planned vq occurrence");
    let mut crop = render_noise(&mut rng, p * p * cfg.channels, cfg.noise_sigma);
    for (c, v) in crop.iter_mut().zip(&bank.patterns[cv]) {
        *c += v;
    }
    annotations.push(Annotation {
        id: format!("{id}/vq2d"),
        task: Task::Vq2d,
        video_id: id.clone(),
        concept: cv,
        query: Query::Visual {
            crop: GridData {
                shape: vec![p, p, cfg.channels],
                data: crop,
            },
        },
        segments: vec![vq.segment],
        boxes: Some(vq.boxes.clone()),
        query_frame: Some(t - 1),
    });

    let nlq = occurrences
        .iter()
        .find(|o| o.role == Role::Nlq)
        .expect("planned nlq occurrence");
    annotations.push(Annotation {
        id: format!("{id}/nlq"),
        task: Task::Nlq,
        video_id: id.clone(),
        concept: cn,
        query: Query::Text {
            tokens: ConceptBank::concept_phrase(cn, Task::Nlq),
        },
        segments: vec![nlq.segment],
        boxes: Some(nlq.boxes.clone()),
        query_frame: None,
    });

    let mq_query = if cfg.mq_category_queries {
        Query::Category { class: cm }
    } else {
        Query::Text {
            tokens: ConceptBank::concept_phrase(cm, Task::Mq),
        }
    };
    annotations.push(Annotation {
        id: format!("{id}/mq"),
        task: Task::Mq,
        video_id: id.clone(),
        concept: cm,
        query: mq_query,
        segments: occurrences
            .iter()
            .filter(|o| o.role == Role::Mq)
            .map(|o| o.segment)
            .collect(),
        boxes: None,
        query_frame: None,
    });
    for a in &annotations {
        a.validate(t)?;
    }
    Ok(Episode {
        id,
        split,
        video,
        occurrences,
        annotations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == s)
    }

    pub fn episode(&self, id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    pub fn bank(&self) -> Result<ConceptBank> {
        make_concept_bank(
            self.config.num_concepts,
            self.config.pattern_size,
            self.config.channels,
            self.seed,
        )
    }
}

/// Full train + val split for `seed`.
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let bank = make_concept_bank(cfg.num_concepts, cfg.pattern_size, cfg.channels, seed)?;
    let jobs: Vec<(u64, Split)> = (0..cfg.train_episodes as u64)
        .map(|i| (i, Split::Train))
        .chain((0..cfg.val_episodes as u64).map(|i| (cfg.train_episodes as u64 + i, Split::Val)))
        .collect();
    let episodes = jobs
        .par_iter()
        .map(|&(i, s)| generate_episode(&bank, cfg, seed, i, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        episodes,
    })
}

// ---- on-disk layout ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    seed: u64,
    gen_config: GenConfig,
    episodes: Vec<EpisodeEntry>,
    annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeEntry {
    id: String,
    split: Split,
    file: String,
    shape: Vec<usize>,
    occurrences: Vec<Occurrence>,
}

pub fn write_tensor(path: &Path, a: &Array<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 8 * a.shape().len() + 4 * a.len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
    for &d in a.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Array<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "missing tensor header"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = 8 + 8 * rank;
    if rank > 8 || bytes.len() < body {
        return Err(Error::format(path, "truncated tensor header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() - body != 4 * n {
        return Err(Error::format(
            path,
            format!(
                "tensor {:?} needs {} data bytes, found {}",
                shape,
                4 * n,
                bytes.len() - body
            ),
        ));
    }
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array::new(&shape, data)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    ds.episodes
        .par_iter()
        .map(|e| write_tensor(&ep_dir.join(format!("{}.bin", e.id)), &e.video.frames))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: ds.seed,
        gen_config: ds.config.clone(),
        episodes: ds
            .episodes
            .iter()
            .map(|e| EpisodeEntry {
                id: e.id.clone(),
                split: e.split,
                file: format!("episodes/{}.bin", e.id),
                shape: e.video.frames.shape().to_vec(),
                occurrences: e.occurrences.clone(),
            })
            .collect(),
        annotations: ds
            .episodes
            .iter()
            .flat_map(|e| e.annotations.iter().cloned())
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let version: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::format(
                &path,
                format!("unsupported format_version {v} (expected {DATASET_FORMAT_VERSION})"),
            ))
        }
        None => return Err(Error::format(&path, "missing format_version")),
    }
    let m: Manifest =
        serde_json::from_value(version).map_err(|e| Error::format(&path, e.to_string()))?;
    let episodes = m
        .episodes
        .into_par_iter()
        .map(|entry| {
            let file = dir.join(&entry.file);
            let frames = read_tensor(&file)?;
            if frames.shape() != entry.shape.as_slice() {
                return Err(Error::format(
                    &file,
                    format!("shape {:?} disagrees with manifest {:?}", frames.shape(), entry.shape),
                ));
            }
            let video = VideoTensor::new(frames)?;
            Ok(Episode {
                id: entry.id,
                split: entry.split,
                video,
                occurrences: entry.occurrences,
                annotations: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        config: m.gen_config,
        seed: m.seed,
        episodes,
    };
    for a in m.annotations {
        let ep = ds
            .episodes
            .iter_mut()
            .find(|e| e.id == a.video_id)
            .ok_or_else(|| Error::format(&path, format!("annotation {} references unknown video {}", a.id, a.video_id)))?;
        a.validate(ep.video.len())?;
        ep.annotations.push(a);
    }
    Ok(ds)
}

// ---- reference signal ----------------------------------------------------------

/// Per-frame best normalised match of `pattern` over grid-aligned cells,
/// in `[-1, 1]`.
pub fn concept_energy(video: &VideoTensor, pattern: &[f32], pattern_size: usize) -> Vec<f64> {
    let s = video.frames.shape();
    let (size, ch) = (s[1], s[3]);
    let p = pattern_size;
    let pn = pattern.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    (0..video.len())
        .map(|t| {
            let f = video.frame(t);
            let mut best = f64::NEG_INFINITY;
            for y in (0..=size - p).step_by(p) {
                for x in (0..=size - p).step_by(p) {
                    let (mut dot, mut nn) = (0.0, 0.0);
                    for py in 0..p {
                        for px in 0..p {
                            for c in 0..ch {
                                let v = f[((y + py) * size + x + px) * ch + c] as f64;
                                dot += v * pattern[(py * p + px) * ch + c] as f64;
                                nn += v * v;
                            }
                        }
                    }
                    best = best.max(dot / (pn * nn.sqrt().max(1e-12)));
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
