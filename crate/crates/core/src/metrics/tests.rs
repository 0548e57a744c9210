use proptest::prelude::*;

use super::*;
use crate::data::Query;
use crate::synthgen::{generate_dataset, GenConfig};

fn tube(s: usize, e: usize, b: BoxCxCyWh) -> Tube {
    Tube::new([s, e], vec![b; e - s + 1]).unwrap()
}

#[test]
fn temporal_iou_examples() {
    assert_eq!(temporal_iou([3, 9], [3, 9]), 1.0);
    assert_eq!(temporal_iou([0, 10], [5, 15]), 6.0 / 16.0);
    assert_eq!(temporal_iou([0, 4], [5, 9]), 0.0);
    assert_eq!(temporal_iou([0, 10], [2, 12]), 9.0 / 13.0);
    assert_eq!(temporal_iou([4, 4], [4, 4]), 1.0);
}

#[test]
fn tube_iou_examples() {
    let b = [0.5, 0.5, 0.2, 0.2];
    let g = tube(2, 6, b);
    assert_eq!(st_tube_iou(&g, &g), 1.0);
    assert_eq!(st_tube_iou(&tube(10, 12, b), &g), 0.0);
    let half = tube(2, 6, [0.6, 0.5, 0.2, 0.2]);
    assert!((st_tube_iou(&half, &g) - 1.0 / 3.0).abs() < 1e-12);
    assert!(success(&half, &g, 0.05));
    assert!(success(&g, &g, 0.05));
    assert!(!success(&tube(10, 12, b), &g, 0.05));
    // frames outside the GT only enlarge the union
    let longer = tube(2, 8, b);
    assert!((st_tube_iou(&longer, &g) - 5.0 / 7.0).abs() < 1e-12);
    assert!(Tube::new([3, 5], vec![b; 2]).is_err());
}

#[test]
fn recovery_examples() {
    let g = tube(0, 9, [0.5, 0.5, 0.7, 0.4]);
    assert_eq!(recovery(&g, &g, 0.5), 100.0);
    // x shift of 0.3 on width 0.7 gives IoU 0.4/1.0
    let shifted = tube(0, 9, [0.5 + 0.3, 0.5, 0.7, 0.4]);
    assert!((box_iou(shifted.boxes[0], g.boxes[0]) - 0.4).abs() < 1e-12);
    assert_eq!(recovery(&shifted, &g, 0.5), 0.0);
    let mut mixed = g.clone();
    for b in mixed.boxes.iter_mut().skip(5) {
        *b = [0.1, 0.1, 0.1, 0.1];
    }
    assert_eq!(recovery(&mixed, &g, 0.5), 50.0);
    // predicted frames outside the GT count as failures
    let over = tube(5, 14, [0.5, 0.5, 0.7, 0.4]);
    assert_eq!(recovery(&over, &g, 0.5), 50.0);
    let empty = Tube {
        segment: [0, 0],
        boxes: vec![],
    };
    assert_eq!(recovery(&empty, &g, 0.5), 0.0);
}

fn seg_samples(v: &[(Vec<(Segment, f64)>, Vec<Segment>)]) -> Vec<ApSample<Segment, Segment>> {
    v.iter()
        .map(|(p, g)| ApSample {
            preds: p.clone(),
            gts: g.clone(),
        })
        .collect()
}

fn tiou(p: &Segment, g: &Segment) -> f64 {
    temporal_iou(*p, *g)
}

#[test]
fn ap_examples() {
    let one = seg_samples(&[(vec![([0, 5], 0.9)], vec![[0, 5]])]);
    assert_eq!(average_precision(&one, tiou, 0.25).unwrap(), 1.0);
    let miss_hit = seg_samples(&[(vec![([20, 30], 0.9), ([0, 5], 0.5)], vec![[0, 5]])]);
    assert_eq!(average_precision(&miss_hit, tiou, 0.25).unwrap(), 0.5);
    let bad = seg_samples(&[(vec![([0, 5], f64::NAN)], vec![[0, 5]])]);
    assert!(matches!(average_precision(&bad, tiou, 0.25), Err(Error::Contract(_))));
    let none: Vec<ApSample<Segment, Segment>> = vec![];
    assert_eq!(average_precision(&none, tiou, 0.25).unwrap(), 0.0);
}

#[test]
fn recall_examples() {
    let s = vec![(vec![[0, 10]], vec![[5, 15]])];
    assert_eq!(recall_at_k(&s, 1, 0.5).unwrap(), 0.0);
    assert_eq!(recall_at_k(&s, 1, 0.3).unwrap(), 100.0);
    let perfect = vec![(vec![[1, 2], [7, 9]], vec![[1, 2]]), (vec![[3, 4]], vec![[3, 4]])];
    assert_eq!(recall_at_k(&perfect, 1, 0.5).unwrap(), 100.0);
    // per GT instance: one of two instances is recalled
    let mq = vec![(vec![[0, 4]], vec![[0, 4], [20, 24]])];
    assert_eq!(recall_at_k(&mq, 5, 0.5).unwrap(), 50.0);
    // the top-k budget scales with the instance count
    let mq = vec![(vec![[0, 4], [20, 24], [50, 60]], vec![[0, 4], [20, 24]])];
    assert_eq!(recall_at_k(&mq, 1, 0.5).unwrap(), 100.0);
    let mq = vec![(vec![[0, 4], [50, 60], [20, 24]], vec![[0, 4], [20, 24]])];
    assert_eq!(recall_at_k(&mq, 1, 0.5).unwrap(), 50.0);
    assert!(matches!(recall_at_k(&s, 0, 0.5), Err(Error::Config(_))));
}

/// AP from precision/recall at every cutoff, each cutoff matched from
/// scratch with exhaustive search over GT choices in rank order.
fn brute_ap(samples: &[(Vec<(Segment, f64)>, Vec<Segment>)], thr: f64) -> f64 {
    let mut all: Vec<(usize, Segment, f64)> = Vec::new();
    for (i, (p, _)) in samples.iter().enumerate() {
        for &(s, sc) in p {
            all.push((i, s, sc));
        }
    }
    all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let total: usize = samples.iter().map(|s| s.1.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    for n in 1..=all.len() {
        let mut used: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.1.len()]).collect();
        let mut tp = 0;
        for &(i, s, _) in &all[..n] {
            let gts = &samples[i].1;
            let mut best = None;
            let mut best_v = -1.0;
            for (g, gt) in gts.iter().enumerate() {
                let v = temporal_iou(s, *gt);
                if !used[i][g] && v >= thr && v > best_v {
                    best = Some(g);
                    best_v = v;
                }
            }
            if let Some(g) = best {
                used[i][g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (n, &(r, _)) in points.iter().enumerate() {
        let p_env = points[n..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (r - prev_r) * p_env;
        prev_r = r;
    }
    ap
}

fn brute_recall(samples: &[(Vec<Segment>, Vec<Segment>)], k: usize, m: f64) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for (p, g) in samples {
        for gt in g {
            total += 1;
            let mut found = false;
            for (rank, pr) in p.iter().enumerate() {
                if rank < k * g.len() && temporal_iou(*pr, *gt) >= m {
                    found = true;
                }
            }
            hit += found as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * hit as f64 / total as f64
    }
}

fn segment() -> impl Strategy<Value = Segment> {
    (0usize..30, 0usize..8).prop_map(|(s, l)| [s, s + l])
}

fn instance() -> impl Strategy<Value = Vec<(Vec<(Segment, f64)>, Vec<Segment>)>> {
    prop::collection::vec(
        (
            prop::collection::vec((segment(), 0.0f64..1.0), 0..=6),
            prop::collection::vec(segment(), 0..=3),
        ),
        1..5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ap_matches_brute_force(inst in instance(), thr in prop::sample::select(vec![0.1, 0.25, 0.5])) {
        let got = average_precision(&seg_samples(&inst), tiou, thr).unwrap();
        prop_assert!((got - brute_ap(&inst, thr)).abs() < 1e-9);
    }

    #[test]
    fn ap_depends_on_rank_only(inst in instance()) {
        let warped: Vec<_> = inst
            .iter()
            .map(|(p, g)| (p.iter().map(|&(s, c)| (s, (3.0 * c).exp() - 7.0)).collect(), g.clone()))
            .collect();
        let a = average_precision(&seg_samples(&inst), tiou, 0.25).unwrap();
        let b = average_precision(&seg_samples(&warped), tiou, 0.25).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn recall_matches_brute_force(inst in instance(), k in 1usize..6, m in prop::sample::select(vec![0.3, 0.5])) {
        let s: Vec<(Vec<Segment>, Vec<Segment>)> =
            inst.iter().map(|(p, g)| (p.iter().map(|x| x.0).collect(), g.clone())).collect();
        prop_assert!((recall_at_k(&s, k, m).unwrap() - brute_recall(&s, k, m)).abs() < 1e-9);
    }

    #[test]
    fn ious_are_symmetric_and_bounded(a in segment(), b in segment(),
        ba in (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5),
        bb in (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5)) {
        let t = temporal_iou(a, b);
        prop_assert_eq!(t, temporal_iou(b, a));
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert_eq!(t == 1.0, a == b);
        let ta = tube(a[0], a[1], [ba.0, ba.1, ba.2, ba.3]);
        let tb = tube(b[0], b[1], [bb.0, bb.1, bb.2, bb.3]);
        let st = st_tube_iou(&ta, &tb);
        prop_assert!((st - st_tube_iou(&tb, &ta)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&st));
        prop_assert!((st_tube_iou(&ta, &ta) - 1.0).abs() < 1e-12);
        prop_assert_eq!(recovery(&ta, &ta, 0.5), 100.0);
        prop_assert!(success(&ta, &ta, 0.05));
    }
}

fn gt_records(gts: &[GtRef<'_>]) -> Vec<PredictionRecord> {
    gts.iter()
        .map(|g| PredictionRecord {
            video_id: g.ann.video_id.clone(),
            annotation_id: g.ann.id.clone(),
            task: g.ann.task,
            segments: g
                .ann
                .segments
                .iter()
                .enumerate()
                .map(|(i, &[s, e])| Candidate {
                    start: s,
                    end: e,
                    score: 1.0 - i as f64 * 0.1,
                    boxes: (i == 0).then(|| g.ann.boxes.clone()).flatten(),
                })
                .collect(),
        })
        .collect()
}

fn small_gts() -> crate::synthgen::Dataset {
    let cfg = GenConfig {
        train_episodes: 0,
        val_episodes: 8,
        ..GenConfig::default()
    };
    generate_dataset(&cfg, 17).unwrap()
}

fn refs(ds: &crate::synthgen::Dataset) -> Vec<GtRef<'_>> {
    ds.episodes
        .iter()
        .flat_map(|ep| ep.annotations.iter().map(move |a| GtRef { ann: a, video_len: ep.video.len() }))
        .collect()
}

#[test]
fn ground_truth_scores_perfectly() {
    let ds = small_gts();
    let gts = refs(&ds);
    let r = evaluate(&gt_records(&gts), &gts, &MetricConfig::default()).unwrap();
    assert_eq!(r.get(Task::Vq2d, "tAP25"), Some(1.0));
    assert_eq!(r.get(Task::Vq2d, "stAP25"), Some(1.0));
    assert_eq!(r.get(Task::Vq2d, "rec%"), Some(100.0));
    assert_eq!(r.get(Task::Vq2d, "Succ"), Some(100.0));
    assert_eq!(r.get(Task::Mq, "tAP25"), Some(1.0));
    for t in [Task::Nlq, Task::Mq] {
        for k in [1, 5] {
            for m in [0.3, 0.5] {
                assert_eq!(r.get(t, &recall_key(k, m)), Some(100.0), "{t} {k} {m}");
            }
        }
    }
    assert_eq!(r.get(Task::Nlq, ZERO_SHOT_BOX_KEY), Some(1.0));
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.find("tAP25").unwrap() < json.find("stAP25").unwrap());
    let table = r.to_string();
    assert!(table.contains("r@1 tIoU=0.3") && table.contains("Succ"));

    // nothing predicted at all
    let empty = evaluate(&[], &gts, &MetricConfig::default()).unwrap();
    assert_eq!(empty.get(Task::Vq2d, "tAP25"), Some(0.0));
    assert_eq!(empty.get(Task::Nlq, &recall_key(1, 0.3)), Some(0.0));
}

#[test]
fn unknown_ids_are_listed() {
    let ds = small_gts();
    let gts = refs(&ds);
    let mut recs = gt_records(&gts);
    recs[0].video_id = "nope-1".into();
    recs[3].video_id = "nope-2".into();
    let err = evaluate(&recs, &gts, &MetricConfig::default()).unwrap_err().to_string();
    assert!(err.contains("nope-1") && err.contains("nope-2"), "{err}");
    let mut recs = gt_records(&gts);
    recs[1].annotation_id = "ghost".into();
    assert!(evaluate(&recs, &gts, &MetricConfig::default()).is_err());
}

fn centered_gts(n: usize, full: bool) -> Vec<Annotation> {
    (0..n)
        .map(|i| {
            let s = 10 + i % 7;
            let e = s + 6;
            let b = if full { [0.5, 0.5, 1.0, 1.0] } else { [0.5, 0.5, 0.4, 0.4] };
            Annotation {
                id: format!("a{i}"),
                task: Task::Vq2d,
                video_id: format!("v{i}"),
                concept: 0,
                query: Query::Category { class: 0 },
                segments: vec![[s, e]],
                boxes: Some(vec![b; e - s + 1]),
                query_frame: Some(39),
            }
        })
        .collect()
}

#[test]
fn centered_baseline_hits_full_frame_targets() {
    let anns = centered_gts(20, true);
    let gts: Vec<GtRef> = anns.iter().map(|a| GtRef { ann: a, video_len: 40 }).collect();
    let b = random_baselines(&gts, BaselineMode::RandomCentered, 0, 5, &MetricConfig::default()).unwrap();
    assert!(b.mean.get(Task::Vq2d, "Succ").unwrap() > 0.0);
    assert_eq!(b.per_seed.len(), 5);
}

#[test]
fn centered_beats_random_on_centered_targets() {
    let anns = centered_gts(60, false);
    let gts: Vec<GtRef> = anns.iter().map(|a| GtRef { ann: a, video_len: 40 }).collect();
    let cfg = MetricConfig::default();
    let rnd = random_baselines(&gts, BaselineMode::RandomBoxes, 0, 5, &cfg).unwrap();
    let cen = random_baselines(&gts, BaselineMode::RandomCentered, 0, 5, &cfg).unwrap();
    assert!(rnd.mean.get(Task::Vq2d, "stAP25").unwrap() <= cen.mean.get(Task::Vq2d, "stAP25").unwrap());
}

#[test]
fn baseline_seeds_are_reproducible() {
    let ds = small_gts();
    let gts = refs(&ds);
    let cfg = MetricConfig::default();
    let one = random_baselines(&gts, BaselineMode::RandomBoxes, 4, 1, &cfg).unwrap();
    let five = random_baselines(&gts, BaselineMode::RandomBoxes, 4, 5, &cfg).unwrap();
    assert_eq!(one.per_seed[0], five.per_seed[0]);
    assert_eq!(five.seeds, vec![4, 5, 6, 7, 8]);
    for rec in random_predictions(&gts, BaselineMode::RandomBoxes, 1) {
        for c in &rec.segments {
            assert!(c.start <= c.end);
            if let Some(b) = &c.boxes {
                assert_eq!(b.len(), c.end - c.start + 1);
                for x in b {
                    assert!(x[0] - x[2] / 2.0 >= -1e-12 && x[0] + x[2] / 2.0 <= 1.0 + 1e-12);
                }
            }
        }
        if rec.task == Task::Vq2d {
            assert_eq!(rec.segments.len(), 1);
        }
    }
}

#[test]
fn randomized_boxes_keep_segments() {
    let ds = small_gts();
    let gts = refs(&ds);
    let recs = gt_records(&gts);
    let r = randomize_boxes(&recs, BaselineMode::RandomBoxes, 2);
    for (a, b) in recs.iter().zip(&r) {
        assert_eq!(a.segments.len(), b.segments.len());
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert_eq!(x.segment(), y.segment());
            assert_eq!(x.boxes.is_some(), y.boxes.is_some());
        }
    }
    let rep = evaluate(&r, &gts, &MetricConfig::default()).unwrap();
    assert!(rep.get(Task::Nlq, ZERO_SHOT_BOX_KEY).unwrap() < 0.5);
}

#[test]
fn report_mean_and_config() {
    let a = Report {
        vq2d: Some(TaskReport {
            task: Task::Vq2d,
            n: 2,
            metrics: vec![("tAP25".into(), 0.2)],
        }),
        ..Report::default()
    };
    let mut b = a.clone();
    b.vq2d.as_mut().unwrap().metrics[0].1 = 0.4;
    assert!((Report::mean(&[a, b]).get(Task::Vq2d, "tAP25").unwrap() - 0.3).abs() < 1e-12);
    let mut c = MetricConfig::default();
    c.success_iou = 0.0;
    assert!(c.validate().is_err());
    assert!("random_centered".parse::<BaselineMode>().is_ok());
    assert!("bogus".parse::<BaselineMode>().is_err());
}
