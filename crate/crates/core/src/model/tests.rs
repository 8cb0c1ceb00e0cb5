use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::signal::AcousticSegment;

fn micro() -> ModelConfig {
    ModelConfig {
        d_mfcc: 3,
        d_w: 3,
        hidden: 4,
        d: 6,
        d_e: 6,
        vocab: 7,
        d_a: 2,
        n: 5,
        m: 1,
        normalize_attention: false,
    }
}

fn segment(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Arc<AcousticSegment> {
    let rows: Vec<Vec<f32>> = (0..cfg.n)
        .map(|_| {
            (0..cfg.d_mfcc)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let t = Tensor::from_rows(&rows).unwrap();
    Arc::new(crate::signal::pad_to_n(&t, cfg.n, &vec![0.0; cfg.d_mfcc]).unwrap())
}

fn example(cfg: &ModelConfig, seed: u64) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..cfg.vocab - 4)).collect();
    targets.push(cfg.eops());
    targets.resize(cfg.k(), cfg.pad());
    TrainingExample {
        word: format!("w{seed}"),
        utterance_id: "u".into(),
        speaker_id: "s".into(),
        target: segment(cfg, &mut rng),
        left: (0..cfg.m).map(|_| segment(cfg, &mut rng)).collect(),
        right: (0..cfg.m).map(|_| segment(cfg, &mut rng)).collect(),
        word_vectors: (0..2 * cfg.m + 1)
            .map(|_| (0..cfg.d_w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        aux: {
            let mut a = vec![0.0; cfg.d_a];
            if cfg.d_a > 0 {
                a[rng.random_range(0..cfg.d_a)] = 1.0;
            }
            a
        },
        targets,
    }
}

#[test]
fn names_and_tensors_agree() {
    let cfg = micro();
    let p = ModelParams::init(&cfg, 1).unwrap();
    for ((name, shape), t) in cfg.param_shapes().iter().zip(p.tensors()) {
        assert_eq!(shape.as_slice(), t.shape(), "{name}");
    }
    assert_eq!(p.tensors().len(), 30);
}

#[test]
fn forget_bias_starts_at_one() {
    let p = ModelParams::init(&micro(), 1).unwrap();
    let b = p.encoder.b.data();
    assert!(b[..6].iter().all(|&x| x == 0.0));
    assert!(b[6..12].iter().all(|&x| x == 1.0));
}

#[test]
fn aux_width_leaves_other_weights_alone() {
    let mut cfg = micro();
    let a = ModelParams::init(&cfg, 9).unwrap();
    cfg.d_a = 0;
    let b = ModelParams::init(&cfg, 9).unwrap();
    for ((name, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        if name != "fusion.w2" {
            assert_eq!(x, y, "{name}");
        }
    }
}

#[test]
fn shape_mismatch_lists_every_tensor() {
    let cfg = micro();
    let mut named: Vec<(String, Tensor)> = ModelParams::init(&cfg, 1)
        .unwrap()
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    named[0].1 = Tensor::zeros(&[2, 2]);
    named.pop();
    let err = ModelParams::from_named(&cfg, named)
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("bilstm_c.fwd.w_x: expected [3, 16], found [2, 2]"),
        "{err}"
    );
    assert!(
        err.contains("fusion.b: expected [6], found nothing"),
        "{err}"
    );
}

#[test]
fn batching_matches_single_examples() {
    let cfg = micro();
    let p = ModelParams::init(&cfg, 3).unwrap();
    let exs: Vec<TrainingExample> = (0..3).map(|s| example(&cfg, s)).collect();
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let refs: Vec<&TrainingExample> = exs.iter().collect();
    let enc = encode(&mut tape, &cfg, &bp, &refs).unwrap();
    let logits = decode_teacher_forced(&mut tape, &cfg, &bp, enc.z_new, &refs).unwrap();
    let lv = tape.value(logits).clone();
    for (b, ex) in exs.iter().enumerate() {
        let single = forward(&p, ex, DecodeMode::TeacherForced).unwrap();
        for i in 0..cfg.k() {
            for (x, y) in lv.row(i * 3 + b).iter().zip(single.logits.row(i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn entangle_matches_loop() {
    let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
    let f = [0.5, -2.0];
    let (out, alpha) = entangle(&h, &f).unwrap();
    for (i, &got) in alpha.iter().enumerate() {
        let a: f32 = h.row(i).iter().zip(&f).map(|(x, y)| x * y).sum();
        assert_eq!(got, a);
        for (o, x) in out.row(i).iter().zip(h.row(i)) {
            assert_eq!(*o, a * x);
        }
    }
}

#[test]
fn bilstm_forward_reports_finals() {
    let cfg = micro();
    let p = ModelParams::init(&cfg, 4).unwrap();
    let seq = example(&cfg, 0).target.frames().clone();
    let out = bilstm_forward(&p.bilstm_t, &seq).unwrap();
    assert_eq!(out.h.shape(), &[5, 8]);
    assert_eq!(&out.h.row(4)[..4], out.fwd_final.as_slice());
    assert_eq!(&out.h.row(0)[4..], out.bwd_final.as_slice());
}

#[test]
fn greedy_pads_after_end_token() {
    let cfg = micro();
    let mut p = ModelParams::init(&cfg, 5).unwrap();
    p.proj_b.data_mut()[cfg.eops()] = 1e4;
    let trace = forward(&p, &example(&cfg, 1), DecodeMode::Greedy).unwrap();
    let tokens = trace.tokens.unwrap();
    assert_eq!(tokens[0], cfg.eops());
    assert!(tokens[1..].iter().all(|&t| t == cfg.pad()));
    assert_eq!(tokens.len(), 50);
}

#[test]
fn wrong_aux_width_is_rejected() {
    let cfg = micro();
    let p = ModelParams::init(&cfg, 5).unwrap();
    let mut ex = example(&cfg, 1);
    ex.aux.push(0.0);
    assert!(matches!(
        forward(&p, &ex, DecodeMode::Greedy),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn normalized_attention_sums_to_one() {
    let mut cfg = micro();
    cfg.normalize_attention = true;
    let p = ModelParams::init(&cfg, 5).unwrap();
    let t = forward(&p, &example(&cfg, 2), DecodeMode::TeacherForced).unwrap();
    let s: f32 = t.alpha_c.iter().sum();
    assert!((s - 1.0).abs() < 1e-5);
}
