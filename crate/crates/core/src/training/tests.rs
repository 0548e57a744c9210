use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::synthgen::{generate_dataset, GenConfig};

#[test]
fn window_support_is_the_feasible_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let (s, k) = sample_training_window(&[[50, 60]], 20, 1000, &mut rng).unwrap();
        assert_eq!(k, 0);
        seen.insert(s);
    }
    assert_eq!(seen, (41..=50).collect());
    for _ in 0..100 {
        assert_eq!(sample_training_window(&[[0, 5]], 20, 20, &mut rng).unwrap().0, 0);
    }
    for _ in 0..2000 {
        let (s, _) = sample_training_window(&[[0, 99]], 20, 200, &mut rng).unwrap();
        assert!(s <= 99 && s + 19 < 200);
    }
    assert!(matches!(sample_training_window(&[[0, 5]], 30, 20, &mut rng), Err(Error::Config(_))));
}

#[test]
fn multi_instance_segments_are_chosen_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 3];
    for _ in 0..3000 {
        counts[sample_training_window(&[[0, 3], [40, 44], [90, 95]], 16, 100, &mut rng).unwrap().1] += 1;
    }
    assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
}

fn tasks3(a: usize, b: usize, c: usize) -> Vec<(Task, usize)> {
    vec![(Task::Vq2d, a), (Task::Nlq, b), (Task::Mq, c)]
}

#[test]
fn round_robin_cycles_tasks() {
    let s = BatchStream::new(&tasks3(3, 4, 5), Sampling::RoundRobin, 2, 0).unwrap();
    let order: Vec<Task> = s.take(6).map(|b| b.task).collect();
    assert_eq!(order, vec![Task::Vq2d, Task::Nlq, Task::Mq, Task::Vq2d, Task::Nlq, Task::Mq]);

    let two = vec![(Task::Vq2d, 10), (Task::Nlq, 1000)];
    let s = BatchStream::new(&two, Sampling::RoundRobin, 1, 0).unwrap();
    let a = s.take(2000).filter(|b| b.task == Task::Vq2d).count();
    assert_eq!(a, 1000);
    assert!(BatchStream::new(&tasks3(1, 0, 1), Sampling::RoundRobin, 1, 0).is_err());
}

#[test]
fn round_robin_reshuffles_each_pass() {
    let s = BatchStream::new(&[(Task::Nlq, 5)], Sampling::RoundRobin, 5, 3).unwrap();
    let b: Vec<Vec<usize>> = s.take(4).map(|b| b.items).collect();
    for items in &b {
        let mut sorted = items.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }
    assert!(b.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn concat_follows_dataset_proportions() {
    let two = vec![(Task::Vq2d, 10), (Task::Nlq, 1000)];
    let s = BatchStream::new(&two, Sampling::Concat, 1, 5).unwrap();
    assert_eq!(s.batches_per_epoch(), 1010);
    // each pass covers the union exactly once
    let first: Vec<Batch> = s.clone().take(1010).collect();
    assert_eq!(first.iter().filter(|b| b.task == Task::Vq2d).count(), 10);
    let a = s.take(101 * 200).filter(|b| b.task == Task::Vq2d).count();
    let per_101 = a as f64 / 200.0;
    assert!((per_101 - 1.0).abs() < 0.15, "{per_101}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_robin_windows_are_fair(a in 1usize..50, b in 1usize..50, c in 1usize..50, bs in 1usize..6, off in 0usize..7, n in 1usize..30) {
        let s = BatchStream::new(&tasks3(a, b, c), Sampling::RoundRobin, bs, 9).unwrap();
        let tasks: Vec<Task> = s.skip(off).take(3 * n).map(|b| b.task).collect();
        let count = |t| tasks.iter().filter(|&&x| x == t).count() as i64;
        let (x, y, z) = (count(Task::Vq2d), count(Task::Nlq), count(Task::Mq));
        prop_assert!((x - y).abs() <= 1 && (y - z).abs() <= 1 && (x - z).abs() <= 1);
    }
}

#[test]
fn lr_schedule_steps_by_factor() {
    let c = TrainConfig::default();
    for g in [ParamGroup::Backbone, ParamGroup::Text, ParamGroup::Rest] {
        assert_eq!(c.lr(g, 9), c.lr(g, 0));
        assert_eq!(c.lr(g, c.lr_drop_every) / c.lr(g, 0), c.lr_drop_factor);
    }
    let p = TrainConfig::full_scale();
    assert_eq!(p.lr_backbone, 1e-5);
    let mut bad = TrainConfig::default();
    bad.lr_text = 0.0;
    assert!(bad.validate().is_err());
    bad = TrainConfig::default();
    bad.tasks.clear();
    assert!(bad.validate().is_err());
}

#[test]
fn adamw_zero_gradient_behaviour() {
    let model = Model::new(ModelConfig::desk(), 1).unwrap();
    let zeros: Vec<Array<f32>> = model.params.entries().iter().map(|(_, a)| Array::zeros(a.shape())).collect();
    let mut cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut m = model.clone();
    AdamW::new(&m, &cfg).update(&mut m, &zeros, |_| 1e-3).unwrap();
    assert_eq!(m.params, model.params);
    cfg.weight_decay = 0.01;
    let mut m = model.clone();
    AdamW::new(&m, &cfg).update(&mut m, &zeros, |_| 1e-3).unwrap();
    assert_ne!(m.params, model.params);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let model = Model::new(ModelConfig::desk(), 1).unwrap();
    let ones: Vec<Array<f32>> = model.params.entries().iter().map(|(_, a)| Array::full(a.shape(), 0.5)).collect();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut m = model.clone();
    let mut opt = AdamW::new(&m, &cfg);
    opt.update(&mut m, &ones, |g| if g == ParamGroup::Backbone { 1e-2 } else { 1e-3 })
        .unwrap();
    assert_eq!(opt.steps(), 1);
    for ((name, a), (_, b)) in m.params.entries().iter().zip(model.params.entries()) {
        let lr = if ParamGroup::of(name) == ParamGroup::Backbone { 1e-2 } else { 1e-3 };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((y - x) as f64 - lr).abs() < 1e-6, "{name}");
        }
    }
}

#[test]
fn grad_clip_scales_to_max_norm() {
    let mut g = vec![Array::new(&[2], vec![3.0f32, 4.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].data(), &[3.0, 4.0]);
    clip_grad_norm(&mut g, 1.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-6 && (g[0].data()[1] - 0.8).abs() < 1e-6);
}

fn tiny_data() -> Dataset {
    let cfg = GenConfig {
        train_episodes: 3,
        val_episodes: 0,
        t_min: 64,
        t_max: 80,
        ..GenConfig::default()
    };
    generate_dataset(&cfg, 8).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn examples_mark_all_instances_and_carry_boxes() {
    let ds = tiny_data();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ep in &ds.episodes {
        for a in &ep.annotations {
            let stride = if a.task == Task::Vq2d { 1 } else { 2 };
            let ex = make_example(&ep.video, a, 32, stride, &mut rng).unwrap();
            let w = ex.window.len();
            assert_eq!(w, 32.min(ep.video.len().div_ceil(stride)));
            let t = &ex.targets;
            assert!(t.foreground[t.s..=t.e].iter().all(|&f| f == 1.0));
            assert_eq!(t.boxes.is_some(), a.task == Task::Vq2d);
            if let Some(b) = &t.boxes {
                assert_eq!(b.len(), t.e - t.s + 1);
            }
        }
    }
    // two instances inside one window are both foreground
    let mut ann = ds.episodes[0].annotations[2].clone();
    ann.segments = vec![[4, 7], [20, 25]];
    let ex = make_example(&ds.episodes[0].video, &ann, 64, 1, &mut rng).unwrap();
    let fg: Vec<usize> = (0..64).filter(|&i| ex.targets.foreground[i] == 1.0).collect();
    let start = fg[0] - 4;
    let expect: Vec<usize> = (4..=7).chain(20..=25).map(|f| f - start).collect();
    assert_eq!(fg, expect);
}

#[test]
fn one_epoch_writes_log_and_round_trippable_checkpoint() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
    let before = model.clone();
    let s = train(&mut model, &ds, &quick_cfg(), Some(dir.path())).unwrap();
    assert_eq!(s.steps.len(), 3);
    assert_eq!(s.epoch_mean_loss.len(), 1);
    assert_ne!(model.params, before.params);
    let back = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(back, model);
    assert_eq!(load_checkpoint(&epoch_checkpoint_dir(dir.path(), 0)).unwrap(), model);
    let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for key in ["step", "epoch", "task", "lr", "total", "kl_s", "kl_e", "bce", "att", "l1", "giou"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(lines[0]["task"], "vq2d");
    assert!(lines[1]["l1"].as_f64().unwrap() == 0.0);
}

#[test]
fn runs_are_deterministic_and_task_filtered() {
    let ds = tiny_data();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        tasks: vec![Task::Nlq],
        ..TrainConfig::default()
    };
    let mut a = Model::new(ModelConfig::desk(), 0).unwrap();
    let mut b = a.clone();
    let la = train(&mut a, &ds, &cfg, None).unwrap();
    let lb = train(&mut b, &ds, &cfg, None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert!(la.steps.iter().all(|s| s.task == Task::Nlq));
    assert_eq!(la.steps.len(), 4);
}

#[test]
fn nan_parameters_abort_with_dump() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
    for (name, a) in model.params.entries_mut() {
        if name.starts_with("head.fg") {
            a.data_mut()[0] = f32::NAN;
        }
    }
    let err = train(&mut model, &ds, &quick_cfg(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("train-"));
    assert!(dir.path().join("nan_batch.json").exists());
}

#[test]
fn init_from_rejects_other_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.ff = 48;
    save_checkpoint(&Model::new(cfg, 0).unwrap(), dir.path()).unwrap();
    let mut m = Model::new(ModelConfig::desk(), 0).unwrap();
    let err = init_from(&mut m, dir.path()).unwrap_err();
    let Error::ParamMismatch(names) = err else {
        panic!("expected mismatch, got {err}")
    };
    assert!(names.iter().any(|n| n.contains("ff")), "{names:?}");

    let donor = Model::new(ModelConfig::desk(), 7).unwrap();
    save_checkpoint(&donor, dir.path()).unwrap();
    init_from(&mut m, dir.path()).unwrap();
    assert_eq!(m.params, donor.params);
}
