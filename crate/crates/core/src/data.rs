//! Domain records shared by the generator, trainer, inference and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::Array;

/// Relative `(cx, cy, w, h)` box, all components in `[0, 1]`.
pub type BoxCxCyWh = [f64; 4];

/// Inclusive frame range `[start, end]`.
pub type Segment = [usize; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vq2d,
    Nlq,
    Mq,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Vq2d, Task::Nlq, Task::Mq];

    pub fn name(self) -> &'static str {
        match self {
            Task::Vq2d => "vq2d",
            Task::Nlq => "nlq",
            Task::Mq => "mq",
        }
    }

    /// Parses a comma separated list such as `vq2d,nlq`.
    pub fn parse_list(s: &str) -> Result<Vec<Task>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t: Task = part.parse()?;
            if !out.contains(&t) {
                out.push(t);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        out.sort();
        Ok(out)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vq2d" | "vq" => Ok(Task::Vq2d),
            "nlq" => Ok(Task::Nlq),
            "mq" => Ok(Task::Mq),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// One value per task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMap<T> {
    pub vq2d: T,
    pub nlq: T,
    pub mq: T,
}

impl<T: Copy> TaskMap<T> {
    pub fn uniform(v: T) -> Self {
        Self {
            vq2d: v,
            nlq: v,
            mq: v,
        }
    }

    pub fn get(&self, t: Task) -> T {
        *self.get_ref(t)
    }
}

impl<T> TaskMap<T> {
    pub fn get_ref(&self, t: Task) -> &T {
        match t {
            Task::Vq2d => &self.vq2d,
            Task::Nlq => &self.nlq,
            Task::Mq => &self.mq,
        }
    }

    pub fn get_mut(&mut self, t: Task) -> &mut T {
        match t {
            Task::Vq2d => &mut self.vq2d,
            Task::Nlq => &mut self.nlq,
            Task::Mq => &mut self.mq,
        }
    }
}

/// Query modality. Also selects the decoder's time-embedding vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

/// `{shape, data}` wrapper used to put small arrays in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl GridData {
    pub fn to_array(&self) -> Result<Array<f32>> {
        Array::new(&self.shape, self.data.clone())
    }

    pub fn from_array(a: &Array<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Query {
    /// `[h, w, c]` crop of the object.
    Visual { crop: GridData },
    /// Token ids over the text vocabulary.
    Text { tokens: Vec<usize> },
    /// Activity class index (one-hot query encoder).
    Category { class: usize },
}

impl Query {
    pub fn modality(&self) -> Modality {
        match self {
            Query::Visual { .. } => Modality::Visual,
            Query::Text { .. } | Query::Category { .. } => Modality::Text,
        }
    }
}

/// `T × H × W × C` feature-grid video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: Array<f32>,
    /// Temporal stride relative to the source video (bookkeeping only).
    pub fps_tag: f64,
}

impl VideoTensor {
    pub fn new(frames: Array<f32>) -> Result<Self> {
        if frames.shape().len() != 4 || frames.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "video must be T x H x W x C with T >= 1, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("video frames".into()));
        }
        Ok(Self {
            frames,
            fps_tag: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_size(&self) -> usize {
        self.frames.shape()[1..].iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_size();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoTensor> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside video of {} frames",
                start + len,
                self.len()
            )));
        }
        let n = self.frame_size();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = len;
        Ok(VideoTensor {
            frames: Array::new(&shape, self.frames.data()[start * n..(start + len) * n].to_vec())?,
            fps_tag: self.fps_tag,
        })
    }

    /// Frames `0, r, 2r, ...`.
    pub fn subsample(&self, r: usize) -> VideoTensor {
        let r = r.max(1);
        if r == 1 {
            return self.clone();
        }
        let n = self.frame_size();
        let idx: Vec<usize> = (0..self.len()).step_by(r).collect();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &t in &idx {
            data.extend_from_slice(self.frame(t));
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = idx.len();
        VideoTensor {
            frames: Array::new(&shape, data).expect("subsample shape"),
            fps_tag: self.fps_tag / r as f64,
        }
    }
}

/// Ground-truth record for one query on one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub task: Task,
    pub video_id: String,
    pub concept: usize,
    pub query: Query,
    /// VQ2D and NLQ carry exactly one segment, MQ one per instance.
    pub segments: Vec<Segment>,
    /// Per-frame boxes over `segments[0]` (VQ2D; also kept for NLQ as
    /// evaluation-only spatial labels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxCxCyWh>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_frame: Option<usize>,
}

impl Annotation {
    pub fn validate(&self, video_len: usize) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Contract(format!("{}: no segments", self.id)));
        }
        for &[s, e] in &self.segments {
            if s > e || e >= video_len {
                return Err(Error::Contract(format!(
                    "{}: segment [{s}, {e}] invalid for {video_len} frames",
                    self.id
                )));
            }
        }
        if matches!(self.task, Task::Vq2d | Task::Nlq) && self.segments.len() != 1 {
            return Err(Error::Contract(format!(
                "{}: {} needs exactly one segment",
                self.id, self.task
            )));
        }
        if let Some(b) = &self.boxes {
            let [s, e] = self.segments[0];
            if b.len() != e - s + 1 {
                return Err(Error::Contract(format!(
                    "{}: {} boxes for segment of {} frames",
                    self.id,
                    b.len(),
                    e - s + 1
                )));
            }
        }
        if self.task == Task::Vq2d {
            if self.boxes.is_none() {
                return Err(Error::Contract(format!("{}: vq2d without boxes", self.id)));
            }
            match self.query_frame {
                Some(q) if self.segments[0][1] < q => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "{}: vq2d segment must end before the query frame",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }
}
