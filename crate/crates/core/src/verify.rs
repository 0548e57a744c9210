//! Gradient verification suites: every differentiable op, every loss term
//! and the full model loss, checked against 64-bit central differences.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GridData, Query, Task, VideoTensor};
use crate::error::Result;
use crate::losses::{
    foreground_bce, giou_loss, guided_attention_loss, kl_loss, l1_box_loss, task_loss, LossWeights, WindowTargets,
};
use crate::model::{forward, Bound, ModelConfig};
use crate::tensors::{finite_diff_check, Array, OpKind, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seeds: usize,
    pub seed: u64,
    pub step: f64,
    pub op_tol: f64,
    pub model_tol: f64,
    pub model_frames: usize,
    /// Coordinates perturbed per model parameter tensor.
    pub model_coords: usize,
    #[serde(skip)]
    pub corrupt: Option<OpKind>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            seed: 0,
            step: 1e-5,
            op_tol: 1e-5,
            model_tol: 1e-4,
            model_frames: 4,
            model_coords: 3,
            corrupt: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Loss,
    Model,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub seeds: usize,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<6} {:<22} seeds={:<3} max_rel_err={:<10.3e} tol={:.0e} {}",
                format!("{:?}", c.kind).to_lowercase(),
                c.name,
                c.seeds,
                c.max_rel_err,
                c.tol,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    params: Vec<(String, Array<f64>)>,
    f: CaseFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape, data).expect("shape matches data")
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let mut a = uniform(rng, shape, 0.1, 1.0);
    for v in a.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    a
}

/// Weighted sum with fixed random weights so every output element matters.
fn reduce(tape: &mut Tape<f64>, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(x, w)?;
    Ok(tape.sum(m))
}

fn named(items: Vec<(&str, Array<f64>)>) -> Vec<(String, Array<f64>)> {
    items.into_iter().map(|(n, a)| (n.to_string(), a)).collect()
}

fn op_case(op: OpKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let wseed = seed.wrapping_add(7);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    macro_rules! case {
        ($params:expr, |$t:ident, $v:ident| $body:expr) => {
            Case {
                params: named($params),
                f: Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| {
                    let out: Var = $body;
                    reduce($t, out, wseed)
                }),
            }
        };
    }
    match op {
        OpKind::MatMul => {
            let c = r(&mut rng, &[2, 3, 4]);
            case!(
                vec![("a", r(&mut rng, &[2, 3, 4])), ("b", r(&mut rng, &[4, 5])), ("c", c)],
                |t, v| {
                    let x = t.matmul(v[0], v[1])?;
                    let y = t.matmul_nt(v[0], v[2])?;
                    let y = t.reshape(y, &[2, 9])?;
                    let x = t.reshape(x, &[2, 15])?;
                    t.concat(&[x, y], 1)?
                }
            )
        }
        OpKind::Add => case!(vec![("a", r(&mut rng, &[3, 4])), ("b", r(&mut rng, &[3, 4]))], |t, v| t.add(v[0], v[1])?),
        OpKind::Sub => case!(vec![("a", r(&mut rng, &[3, 4])), ("b", r(&mut rng, &[3, 4]))], |t, v| t.sub(v[0], v[1])?),
        OpKind::Mul => case!(vec![("a", r(&mut rng, &[3, 4])), ("b", r(&mut rng, &[3, 4]))], |t, v| t.mul(v[0], v[1])?),
        OpKind::Div => {
            let b = away_from_zero(&mut rng, &[3, 4]);
            let b = Array::new(&[3, 4], b.data().iter().map(|x| x + x.signum()).collect()).expect("shape");
            case!(vec![("a", r(&mut rng, &[3, 4])), ("b", b)], |t, v| t.div(v[0], v[1])?)
        }
        OpKind::Max | OpKind::Min => {
            let a = r(&mut rng, &[3, 4]);
            let d = away_from_zero(&mut rng, &[3, 4]);
            let b = Array::new(&[3, 4], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).expect("shape");
            if op == OpKind::Max {
                case!(vec![("a", a), ("b", b)], |t, v| t.maximum(v[0], v[1])?)
            } else {
                case!(vec![("a", a), ("b", b)], |t, v| t.minimum(v[0], v[1])?)
            }
        }
        OpKind::AddBias => case!(vec![("x", r(&mut rng, &[2, 3, 4])), ("b", r(&mut rng, &[4]))], |t, v| t
            .add_bias(v[0], v[1])?),
        OpKind::MulBias => case!(vec![("x", r(&mut rng, &[2, 3, 4])), ("g", r(&mut rng, &[4]))], |t, v| t
            .mul_bias(v[0], v[1])?),
        OpKind::Scale => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| t.scale(v[0], -1.7)),
        OpKind::Offset => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| t.offset(v[0], 0.3)),
        OpKind::Abs => case!(vec![("x", away_from_zero(&mut rng, &[3, 4]))], |t, v| t.abs(v[0])),
        OpKind::Gelu => case!(vec![("x", uniform(&mut rng, &[3, 4], -3.0, 3.0))], |t, v| t.gelu(v[0])),
        OpKind::Relu => case!(vec![("x", away_from_zero(&mut rng, &[3, 4]))], |t, v| t.relu(v[0])),
        OpKind::Sigmoid => case!(vec![("x", uniform(&mut rng, &[3, 4], -4.0, 4.0))], |t, v| t.sigmoid(v[0])),
        OpKind::Exp => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| t.exp(v[0])),
        OpKind::Log => case!(vec![("x", uniform(&mut rng, &[3, 4], 0.2, 3.0))], |t, v| t.log(v[0])),
        OpKind::Clamp => {
            // keep clear of the bounds at ±0.5
            let x = Array::new(
                &[3, 4],
                (0..12)
                    .map(|i| {
                        let m = rng.random_range(0.05..0.4);
                        match i % 3 {
                            0 => m,
                            1 => 0.5 + m,
                            _ => -0.5 - m,
                        }
                    })
                    .collect(),
            )
            .expect("shape");
            case!(vec![("x", x)], |t, v| t.clamp(v[0], -0.5, 0.5))
        }
        OpKind::Softmax => {
            let mask: Vec<bool> = vec![true, false, true, true, true, true, false, true];
            case!(vec![("x", uniform(&mut rng, &[3, 2, 4], -2.0, 2.0))], |t, v| {
                let a = t.softmax(v[0]);
                let b = t.softmax_masked(v[0], Some(&mask))?;
                t.concat(&[a, b], 2)?
            })
        }
        OpKind::LogSoftmax => case!(vec![("x", uniform(&mut rng, &[3, 5], -2.0, 2.0))], |t, v| t.log_softmax(v[0])),
        OpKind::LayerNorm => case!(
            vec![
                ("x", uniform(&mut rng, &[3, 6], -2.0, 2.0)),
                ("g", uniform(&mut rng, &[6], 0.5, 1.5)),
                ("b", r(&mut rng, &[6])),
            ],
            |t, v| t.layer_norm(v[0], v[1], v[2])?
        ),
        OpKind::Sum => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)?
        }),
        OpKind::Mean => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)?
        }),
        OpKind::Gather => {
            let idx: Arc<[usize]> = (0..10).map(|_| rng.random_range(0..12)).collect();
            case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| t.gather(v[0], idx.clone(), &[5, 2])?)
        }
        OpKind::Concat => case!(
            vec![("a", r(&mut rng, &[2, 3])), ("b", r(&mut rng, &[2, 2])), ("c", r(&mut rng, &[1, 5]))],
            |t, v| {
                let x = t.concat(&[v[0], v[1]], 1)?;
                t.concat(&[x, v[2]], 0)?
            }
        ),
        OpKind::Reshape => case!(vec![("x", r(&mut rng, &[3, 4]))], |t, v| t.reshape(v[0], &[2, 6])?),
        OpKind::Leaf => case!(vec![("x", r(&mut rng, &[3]))], |_t, v| v[0]),
    }
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.1..0.4),
                rng.random_range(0.1..0.4),
            ]
        })
        .collect()
}

const LOSS_NAMES: [&str; 5] = ["l1", "giou", "kl", "bce", "attention"];

fn loss_case(name: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let n = 5;
    match name {
        "l1" | "giou" => {
            let pred = random_boxes(&mut rng, n);
            let mut target = random_boxes(&mut rng, n);
            // keep |pred − target| clear of the L1 kink
            for (p, q) in pred.iter().zip(target.iter_mut()) {
                for k in 0..4 {
                    if (p[k] - q[k]).abs() < 0.02 {
                        q[k] = p[k] + 0.05;
                    }
                }
            }
            let data: Vec<f64> = pred.iter().flatten().copied().collect();
            let params = named(vec![("boxes", Array::new(&[n, 4], data).expect("shape"))]);
            let f: CaseFn = if name == "l1" {
                Box::new(move |t, v| l1_box_loss(t, v[0], &target))
            } else {
                Box::new(move |t, v| giou_loss(t, v[0], &target))
            };
            Case { params, f }
        }
        "kl" => {
            let w = 8;
            let p = crate::losses::gaussian_target(rng.random_range(0..w), w);
            Case {
                params: named(vec![("logits", uniform(&mut rng, &[w], -2.0, 2.0))]),
                f: Box::new(move |t, v| kl_loss(t, v[0], &p)),
            }
        }
        "bce" => {
            let w = 8;
            let f: Vec<f64> = (0..w).map(|i| if (2..5).contains(&i) { 1.0 } else { 0.0 }).collect();
            Case {
                params: named(vec![("probs", uniform(&mut rng, &[w], 0.05, 0.95))]),
                f: Box::new(move |t, v| foreground_bce(t, v[0], &f)),
            }
        }
        _ => {
            let w = 6;
            let s = rng.random_range(0..w - 1);
            let e = rng.random_range(s..w);
            Case {
                params: named(vec![("scores", uniform(&mut rng, &[2, w, w], -2.0, 2.0))]),
                f: Box::new(move |t, v| {
                    let m = t.softmax(v[0]);
                    guided_attention_loss(t, &[m], s, e)
                }),
            }
        }
    }
}

fn model_case(seed: u64, frames: usize) -> Result<(Case, Task)> {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(seed)?.cast::<f64>();
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let size = cfg.input_size;
    let data: Vec<f32> = (0..frames * size * size * cfg.channels)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let video = VideoTensor::new(Array::new(&[frames, size, size, cfg.channels], data)?)?;
    let task = Task::ALL[(seed % 3) as usize];
    let query = match task {
        Task::Vq2d => {
            let p = cfg.query_grid * cfg.patch();
            let data: Vec<f32> = (0..p * p * cfg.channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Query::Visual {
                crop: GridData {
                    shape: vec![p, p, cfg.channels],
                    data,
                },
            }
        }
        Task::Nlq => Query::Text {
            tokens: (0..4).map(|_| rng.random_range(1..cfg.vocab)).collect(),
        },
        Task::Mq => Query::Category {
            class: rng.random_range(0..cfg.num_classes),
        },
    };
    let s = rng.random_range(0..frames);
    let e = rng.random_range(s..frames);
    let boxes = (task == Task::Vq2d).then(|| random_boxes(&mut rng, e - s + 1));
    let targets = WindowTargets::new(frames, [s, e], &[], boxes)?;
    let weights = LossWeights::default();
    let f: CaseFn = Box::new(move |t, v| {
        let p = Bound::from_parts(v.to_vec(), &names);
        let out = forward(&cfg, t, &p, &video, &query)?;
        Ok(task_loss(t, task, &out, &targets, &weights)?.total)
    });
    Ok((
        Case {
            params: params.entries().to_vec(),
            f,
        },
        task,
    ))
}

fn run_case(case: &Case, cfg: &VerifyConfig, tol: f64, coords: Option<usize>) -> Result<f64> {
    let rep = finite_diff_check(&case.f, &case.params, cfg.step, tol, coords, cfg.corrupt)?;
    Ok(rep.max_rel_err())
}

fn summarize(name: String, kind: CheckKind, errs: &[f64], tol: f64) -> CheckResult {
    let max = errs.iter().fold(0.0f64, |a, &b| if b.is_finite() { a.max(b) } else { f64::INFINITY });
    CheckResult {
        name,
        kind,
        seeds: errs.len(),
        tol,
        max_rel_err: max,
        passed: max < tol,
    }
}

/// Op-level checks only.
pub fn op_checks(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&op| {
            let errs = (0..cfg.seeds as u64)
                .map(|s| run_case(&op_case(op, cfg.seed + s), cfg, cfg.op_tol, None))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(op.name().to_string(), CheckKind::Op, &errs, cfg.op_tol))
        })
        .collect()
}

/// Loss-term checks, one entry per term.
pub fn loss_checks(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    LOSS_NAMES
        .iter()
        .map(|&name| {
            let errs = (0..cfg.seeds as u64)
                .map(|s| run_case(&loss_case(name, cfg.seed + s), cfg, cfg.op_tol, None))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(format!("loss.{name}"), CheckKind::Loss, &errs, cfg.op_tol))
        })
        .collect()
}

/// Full model loss on a short window, cycling the three tasks over seeds.
pub fn model_checks(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut per_task: Vec<(Task, Vec<f64>)> = Task::ALL.iter().map(|&t| (t, Vec::new())).collect();
    for s in 0..cfg.seeds as u64 {
        let (case, task) = model_case(cfg.seed + s, cfg.model_frames)?;
        let e = run_case(&case, cfg, cfg.model_tol, Some(cfg.model_coords))?;
        per_task.iter_mut().find(|(t, _)| *t == task).expect("task").1.push(e);
    }
    Ok(per_task
        .into_iter()
        .filter(|(_, e)| !e.is_empty())
        .map(|(t, e)| summarize(format!("model.{t}"), CheckKind::Model, &e, cfg.model_tol))
        .collect())
}

pub fn run_gradcheck(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = op_checks(cfg)?;
    checks.extend(loss_checks(cfg)?);
    checks.extend(model_checks(cfg)?);
    Ok(VerifyReport { checks })
}
