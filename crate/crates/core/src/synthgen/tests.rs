use super::*;

fn small_cfg() -> GenConfig {
    GenConfig {
        train_episodes: 6,
        val_episodes: 2,
        ..GenConfig::default()
    }
}

fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = (a[1].min(b[1]) as i64 - a[0].max(b[0]) as i64 + 1).max(0) as f64;
    let union = (a[1].max(b[1]) - a[0].min(b[0]) + 1) as f64;
    inter / union
}

#[test]
fn bank_is_deterministic_and_decorrelated() {
    let a = make_concept_bank(12, 4, 3, 7).unwrap();
    let b = make_concept_bank(12, 4, 3, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    assert!(a.max_abs_correlation() < 0.5);
    for i in 0..12 {
        for j in i + 1..12 {
            assert_ne!(a.patterns[i], a.patterns[j]);
        }
    }
    assert!(matches!(make_concept_bank(1, 4, 3, 7), Err(Error::Config(_))));
}

#[test]
fn episode_regenerates_bit_identically() {
    let cfg = small_cfg();
    let bank = make_concept_bank(12, 4, 3, 1).unwrap();
    let a = generate_episode(&bank, &cfg, 1, 3, Split::Train).unwrap();
    let b = generate_episode(&bank, &cfg, 1, 3, Split::Train).unwrap();
    assert_eq!(a, b);
    let c = generate_episode(&bank, &cfg, 1, 4, Split::Train).unwrap();
    assert_ne!(a.occurrences, c.occurrences);
    let d = generate_episode(&bank, &cfg, 2, 3, Split::Train).unwrap();
    assert_ne!(a.occurrences, d.occurrences);
}

#[test]
fn annotations_match_planted_occurrences() {
    let cfg = small_cfg();
    let ds = generate_dataset(&cfg, 11).unwrap();
    assert_eq!(ds.episodes.len(), 8);
    for ep in &ds.episodes {
        let t = ep.video.len();
        assert!((64..=256).contains(&t));
        // disjoint, sorted, never touching the query frame
        for w in ep.occurrences.windows(2) {
            assert!(w[0].segment[1] < w[1].segment[0]);
        }
        assert!(ep.occurrences.iter().all(|o| o.segment[1] < t - 1));
        for o in &ep.occurrences {
            assert_eq!(o.boxes.len(), o.segment[1] - o.segment[0] + 1);
            for b in &o.boxes {
                assert!(b[0] - b[2] / 2.0 >= 0.0 && b[0] + b[2] / 2.0 <= 1.0);
                assert!(b[1] - b[3] / 2.0 >= 0.0 && b[1] + b[3] / 2.0 <= 1.0);
            }
        }
        assert_eq!(ep.annotations.len(), 3);
        for a in &ep.annotations {
            a.validate(t).unwrap();
            let planted: Vec<&Occurrence> = ep
                .occurrences
                .iter()
                .filter(|o| o.concept == a.concept && o.role != Role::Distractor)
                .collect();
            match a.task {
                Task::Mq => {
                    let segs: Vec<Segment> = planted.iter().map(|o| o.segment).collect();
                    assert!(!segs.is_empty());
                    assert_eq!(a.segments, segs);
                }
                Task::Vq2d => {
                    let latest = planted.iter().max_by_key(|o| o.segment[1]).unwrap();
                    assert_eq!(a.segments, vec![latest.segment]);
                    assert_eq!(a.boxes.as_ref(), Some(&latest.boxes));
                    assert_eq!(a.query_frame, Some(t - 1));
                }
                Task::Nlq => {
                    assert_eq!(planted.len(), 1);
                    assert_eq!(a.segments, vec![planted[0].segment]);
                }
            }
        }
    }
}

#[test]
fn replaying_occurrences_reproduces_boxes() {
    let cfg = small_cfg();
    let ds = generate_dataset(&cfg, 5).unwrap();
    for ep in &ds.episodes {
        for o in &ep.occurrences {
            for (i, f) in (o.segment[0]..=o.segment[1]).enumerate() {
                let (x, y) = o.position(f, 4);
                assert_eq!(o.boxes[i], box_of(x, y, 4, 16));
            }
        }
    }
}

#[test]
fn visual_query_is_not_a_pixel_copy() {
    let cfg = small_cfg();
    let ds = generate_dataset(&cfg, 5).unwrap();
    let bank = ds.bank().unwrap();
    let ep = &ds.episodes[0];
    let a = &ep.annotations[0];
    let Query::Visual { crop } = &a.query else {
        panic!("vq query must be visual")
    };
    let pat = &bank.patterns[a.concept];
    assert_ne!(&crop.data, pat);
    let diff: f64 = crop.data.iter().zip(pat).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
        / pat.len() as f64;
    assert!(diff > 0.01 && diff < 0.3, "{diff}");
}

#[test]
fn signal_inside_boxes_exceeds_background() {
    let cfg = small_cfg();
    let ds = generate_dataset(&cfg, 3).unwrap();
    let (mut inside, mut ni, mut outside, mut no) = (0.0, 0usize, 0.0, 0usize);
    for ep in &ds.episodes {
        let mut mask = vec![false; ep.video.frames.len()];
        for o in &ep.occurrences {
            for f in o.segment[0]..=o.segment[1] {
                let (x, y) = o.position(f, 4);
                for py in 0..4 {
                    for px in 0..4 {
                        for c in 0..3 {
                            mask[f * 768 + ((y + py) * 16 + x + px) * 3 + c] = true;
                        }
                    }
                }
            }
        }
        for (v, m) in ep.video.frames.data().iter().zip(mask) {
            if m {
                inside += v.abs() as f64;
                ni += 1;
            } else {
                outside += v.abs() as f64;
                no += 1;
            }
        }
    }
    let (inside, outside) = (inside / ni as f64, outside / no as f64);
    assert!(inside - outside >= 3.0 * cfg.noise_sigma, "{inside} vs {outside}");
}

#[test]
fn energy_threshold_oracle_solves_nlq() {
    let cfg = GenConfig {
        train_episodes: 0,
        val_episodes: 40,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 21).unwrap();
    let bank = ds.bank().unwrap();
    let mut hits = 0;
    for ep in &ds.episodes {
        let a = ep.annotations.iter().find(|a| a.task == Task::Nlq).unwrap();
        let energy = concept_energy(&ep.video, &bank.patterns[a.concept], 4);
        // longest run above threshold
        let mut best: Option<Segment> = None;
        let mut start = None;
        for (t, &e) in energy.iter().chain(std::iter::once(&0.0)).enumerate() {
            match (e > 0.8, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    let seg = [s, t - 1];
                    if best.is_none_or(|b| b[1] - b[0] < seg[1] - seg[0]) {
                        best = Some(seg);
                    }
                    start = None;
                }
                _ => {}
            }
        }
        if best.is_some_and(|b| tiou(b, a.segments[0]) >= 0.3) {
            hits += 1;
        }
    }
    assert!(hits as f64 / 40.0 >= 0.9, "{hits}/40");
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let cfg = GenConfig {
        train_episodes: 2,
        val_episodes: 1,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format_version"], DATASET_FORMAT_VERSION);
    for key in ["seed", "gen_config", "episodes", "annotations"] {
        assert!(manifest.get(key).is_some(), "{key}");
    }
    assert_eq!(manifest["annotations"].as_array().unwrap().len(), 9);
}

#[test]
fn corrupted_tensor_names_the_file() {
    let cfg = GenConfig {
        train_episodes: 1,
        val_episodes: 0,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let file = dir.path().join("episodes/train-00000.bin");
    let mut bytes = fs::read(&file).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&file, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("train-00000.bin"), "{err}");
}

#[test]
fn wrong_format_version_is_rejected() {
    let cfg = GenConfig {
        train_episodes: 1,
        val_episodes: 0,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"format_version\": 1", "\"format_version\": 99", 1)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("format_version 99"), "{err}");
}

#[test]
fn category_queries_option() {
    let cfg = GenConfig {
        train_episodes: 2,
        val_episodes: 0,
        mq_category_queries: true,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 4).unwrap();
    for ep in &ds.episodes {
        let a = ep.annotations.iter().find(|a| a.task == Task::Mq).unwrap();
        assert_eq!(a.query, Query::Category { class: a.concept });
    }
}
