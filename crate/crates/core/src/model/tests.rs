use super::*;
use crate::data::GridData;
use crate::tensors::finite_diff_check;

fn video(t: usize, seed: u64) -> VideoTensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t * 16 * 16 * 3;
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    VideoTensor::new(Array::new(&[t, 16, 16, 3], data).unwrap()).unwrap()
}

fn text(n: usize) -> Query {
    Query::Text {
        tokens: (0..n).map(|i| (i * 7) % 64).collect(),
    }
}

fn rows(tape: &Tape<f32>, v: Var) -> Vec<Vec<f32>> {
    let a = tape.value(v);
    let inner: usize = a.shape()[1..].iter().product();
    a.data().chunks(inner).map(|c| c.to_vec()).collect()
}

#[test]
fn presets_validate() {
    ModelConfig::desk().validate().unwrap();
    ModelConfig::full_scale().validate().unwrap();
    let mut c = ModelConfig::desk();
    c.heads = 5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::desk();
    c.enc_stride = 0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::desk();
    c.window.nlq = 1;
    assert!(c.validate().is_err());
}

#[test]
fn encode_video_shape_and_identical_frames() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(1).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let mut v = video(8, 3);
    let n = v.frame_size();
    let first = v.frame(0).to_vec();
    v.frames.data_mut()[n..2 * n].copy_from_slice(&first);
    let out = encode_video(&cfg, &mut tape, &p, &v).unwrap();
    assert_eq!(tape.shape(out), &[8, 16, 32]);
    let r = rows(&tape, out);
    assert_eq!(r[0], r[1]);
    assert_ne!(r[0], r[2]);
}

#[test]
fn encode_video_rejects_indivisible_grid() {
    let mut cfg = ModelConfig::desk();
    cfg.input_size = 18;
    let params = ModelConfig::desk().init_params(1).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = VideoTensor::new(Array::zeros(&[2, 18, 18, 3])).unwrap();
    assert!(matches!(
        encode_video(&cfg, &mut tape, &p, &v),
        Err(Error::Config(_))
    ));
}

#[test]
fn positional_code_breaks_patch_permutation() {
    // two frames whose patches 0 and 1 are swapped
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(2).unwrap();
    let mut frames = vec![0.0f32; 2 * 16 * 16 * 3];
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                let a = ((y * 4 + x) * 3 + c) as f32 * 0.05;
                let b = -a;
                frames[(y * 16 + x) * 3 + c] = a;
                frames[(y * 16 + x + 4) * 3 + c] = b;
                frames[768 + (y * 16 + x) * 3 + c] = b;
                frames[768 + (y * 16 + x + 4) * 3 + c] = a;
            }
        }
    }
    let v = VideoTensor::new(Array::new(&[2, 16, 16, 3], frames).unwrap()).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = encode_video(&cfg, &mut tape, &p, &v).unwrap();
    let d = tape.data(out);
    let f0_p0 = &d[0..32];
    let f1_p1 = &d[16 * 32 + 32..16 * 32 + 64];
    // same content at different positions must not encode identically
    assert!(f0_p0.iter().zip(f1_p1).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn encode_query_shapes() {
    let mut cfg = ModelConfig::desk();
    let params = cfg.init_params(4).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let q = encode_query(&cfg, &mut tape, &p, &text(5)).unwrap();
    assert_eq!(tape.shape(q), &[5, 32]);

    cfg.query_grid = 4;
    let crop = Query::Visual {
        crop: GridData {
            shape: vec![12, 12, 3],
            data: (0..432).map(|i| (i as f32 * 0.01).sin()).collect(),
        },
    };
    let q = encode_query(&cfg, &mut tape, &p, &crop).unwrap();
    assert_eq!(tape.shape(q), &[16, 32]);

    let c3 = encode_query(&cfg, &mut tape, &p, &Query::Category { class: 3 }).unwrap();
    let c4 = encode_query(&cfg, &mut tape, &p, &Query::Category { class: 4 }).unwrap();
    assert_eq!(tape.shape(c3), &[1, 32]);
    assert_ne!(tape.data(c3), tape.data(c4));
}

#[test]
fn encode_query_rejects_bad_payloads() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(4).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    for q in [
        Query::Text { tokens: vec![] },
        Query::Text { tokens: vec![64] },
        Query::Category { class: 12 },
        Query::Visual {
            crop: GridData {
                shape: vec![4, 4, 2],
                data: vec![0.0; 32],
            },
        },
    ] {
        assert!(matches!(
            encode_query(&cfg, &mut tape, &p, &q),
            Err(Error::InvalidQuery(_))
        ));
    }
}

#[test]
fn strided_encoder_replicates_rows() {
    let mut cfg = ModelConfig::desk();
    cfg.enc_stride = 2;
    let params = cfg.init_params(5).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = encode_video(&cfg, &mut tape, &p, &video(6, 9)).unwrap();
    let q = encode_query(&cfg, &mut tape, &p, &text(3)).unwrap();
    let enc = video_query_encode(&cfg, &mut tape, &p, v, q).unwrap();
    assert_eq!(tape.shape(enc), &[6, 19, 32]);
    let r = rows(&tape, enc);
    for t in [0, 2, 4] {
        assert_eq!(r[t], r[t + 1]);
    }
    assert_ne!(r[0], r[2]);
    assert_eq!(stride_plan(6, 2), (vec![0, 2, 4], vec![0, 0, 1, 1, 2, 2]));

    cfg.enc_stride = 1;
    let enc = video_query_encode(&cfg, &mut tape, &p, v, q).unwrap();
    let r = rows(&tape, enc);
    assert!((0..5).all(|t| r[t] != r[t + 1]));
}

#[test]
fn decoder_single_frame_attention_is_one() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(6).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = forward(&cfg, &mut tape, &p, &video(1, 1), &text(2)).unwrap();
    assert_eq!(out.attention.len(), cfg.dec_layers);
    for a in out.attention_maps(&tape) {
        assert_eq!(a.shape(), &[cfg.heads, 1, 1]);
        assert!(a.data().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn decoder_attention_rows_normalised() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(6).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = forward(&cfg, &mut tape, &p, &video(7, 2), &text(2)).unwrap();
    for a in out.attention_maps(&tape) {
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn shared_time_embedding_ties_modalities() {
    for shared in [true, false] {
        let mut cfg = ModelConfig::desk();
        cfg.shared_time_embedding = shared;
        let params = cfg.init_params(7).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let v = encode_video(&cfg, &mut tape, &p, &video(5, 4)).unwrap();
        let q = encode_query(&cfg, &mut tape, &p, &text(3)).unwrap();
        let enc = video_query_encode(&cfg, &mut tape, &p, v, q).unwrap();
        let (et, _) = space_time_decode(&cfg, &mut tape, &p, enc, Modality::Text).unwrap();
        let (ev, _) = space_time_decode(&cfg, &mut tape, &p, enc, Modality::Visual).unwrap();
        assert_eq!(tape.data(et) == tape.data(ev), shared);
    }
}

#[test]
fn heads_ranges_and_row_determinism() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(8).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let mut e = vec![0.0f32; 8 * 32];
    for (i, v) in e.iter_mut().enumerate() {
        *v = ((i % 32) as f32 * 0.37).sin() * 3.0;
    }
    let e = tape.constant(Array::new(&[8, 32], e).unwrap());
    let out = predict_heads(&mut tape, &p, e).unwrap();
    let pr = out.predictions(&tape);
    assert_eq!(pr.len(), 8);
    for t in 0..8 {
        assert!(pr.boxes[t].iter().all(|&b| (0.0..=1.0).contains(&b)));
        assert!(pr.foreground[t] > 0.0 && pr.foreground[t] < 1.0);
        assert_eq!(pr.row(t), pr.row(0));
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(9).unwrap().cast::<f64>();
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    let mut e = Array::<f64>::zeros(&[3, 32]);
    for (i, v) in e.data_mut().iter_mut().enumerate() {
        *v = (i as f64 * 0.61).cos();
    }
    let report = finite_diff_check(
        |tape, vars| {
            let p = Bound::from_parts(vars[1..].to_vec(), &names);
            let out = predict_heads(tape, &p, vars[0])?;
            let parts = [out.boxes, out.start, out.end, out.foreground];
            let mut total = None;
            for (k, v) in parts.into_iter().enumerate() {
                let s = tape.sum(v);
                let s = tape.scale(s, 1.0 + k as f64);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        },
        &std::iter::once(("e".to_string(), e))
            .chain(params.entries().iter().cloned())
            .collect::<Vec<_>>(),
        1e-5,
        1e-5,
        Some(6),
        None,
    )
    .unwrap();
    assert!(report.entries[0].passed, "{:?}", report.entries[0]);
    assert!(report.passed(), "max {}", report.max_rel_err());
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let v = video(8, 5);
    let a = model.predict(&v, &text(4)).unwrap();
    let b = model.predict(&v, &text(4)).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    let again = Model::new(cfg, 11).unwrap();
    assert_eq!(again.predict(&v, &text(4)).unwrap(), a);
}

#[test]
fn every_parameter_gets_finite_gradient() {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(12).unwrap();
    for q in [text(3), Query::Category { class: 2 }] {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let out = forward(&cfg, &mut tape, &p, &video(4, 6), &q).unwrap();
        let mut total = tape.sum(out.boxes);
        for v in [out.start, out.end, out.foreground] {
            let s = tape.sum(v);
            total = tape.add(total, s).unwrap();
        }
        let g = tape.grad(total, p.vars()).unwrap();
        assert!(g.iter().all(|a| a.all_finite()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::desk(), 13).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, model);
    let a = std::fs::read(dir.path().join("params.bin")).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(&back, dir2.path()).unwrap();
    assert_eq!(a, std::fs::read(dir2.path().join("params.bin")).unwrap());
}

#[test]
fn checkpoint_mismatch_lists_offenders() {
    let mut cfg = ModelConfig::desk();
    let a = Model::new(cfg.clone(), 1).unwrap();
    cfg.ff = 48;
    let mut b = Model::new(cfg, 1).unwrap();
    match b.params.load_from(&a.params) {
        Err(Error::ParamMismatch(list)) => {
            assert!(list.iter().any(|s| s.starts_with("enc.0.ffn1.w")));
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn bilinear_resize_preserves_constants() {
    let src = vec![0.5f32; 5 * 7 * 2];
    let out = resize_bilinear(&src, 5, 7, 2, 4, 4);
    assert_eq!(out.len(), 32);
    assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
}
