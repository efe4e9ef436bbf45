//! Hand-written reference computations checked against the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transmamba_core::converter::{convert, ConverterConfig, ConverterMode, MlpConverterWeights};
use transmamba_core::dual::{
    attention_forward, build_a_cross, rope_single, ssm_scan, AttentionInputs, SsmInputs, SsmState,
};
use transmamba_core::model::reference::{reference_forward, Mechanism};
use transmamba_core::model::{generate, Model, ModelConfig, ZGating};
use transmamba_core::schedule::preset;
use transmamba_core::verify::random_ssm;
use transmamba_core::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn naive_rope(v: &[f64], pos: usize, theta: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let a = pos as f64 * theta.powf(-(2.0 * i as f64) / d as f64);
        let (x, y) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = x * a.cos() - y * a.sin();
        out[2 * i + 1] = x * a.sin() + y * a.cos();
    }
    out
}

#[test]
fn attention_matches_loop() {
    let mut r = rng(1);
    let (t, h, dk, dv) = (7, 2, 4, 3);
    let q = rand_tensor(&mut r, vec![t, h, dk]);
    let k = rand_tensor(&mut r, vec![t, h, dk]);
    let v = rand_tensor(&mut r, vec![t, h, dv]);
    for rope in [None, Some(10000.0)] {
        let out = attention_forward(
            &AttentionInputs { q: q.clone(), k: k.clone(), v: v.clone(), rope_theta: rope },
            true,
        )
        .unwrap();
        for hi in 0..h {
            for i in 0..t {
                let row = |x: &Tensor<f64>, j: usize, w: usize| -> Vec<f64> {
                    let raw: Vec<f64> = (0..w).map(|c| x.get(&[j, hi, c])).collect();
                    match rope {
                        Some(th) => naive_rope(&raw, j, th),
                        None => raw,
                    }
                };
                let qi = row(&q, i, dk);
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qi.iter().zip(row(&k, j, dk)).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dv {
                    let want: f64 = (0..=i).map(|j| (scores[j] - m).exp() / z * v.get(&[j, hi, c])).sum();
                    assert!((out.get(&[i, hi, c]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_with_empty_sequence() {
    let e = Tensor::<f64>::zeros(vec![0, 2, 4]);
    let out = attention_forward(&AttentionInputs { q: e.clone(), k: e.clone(), v: e, rope_theta: None }, true).unwrap();
    assert_eq!(out.shape(), &[0, 2, 4]);
}

#[test]
fn rope_scores_depend_on_offset_only() {
    let mut r = rng(2);
    let q = rand_tensor(&mut r, vec![1, 1, 8]);
    let k = rand_tensor(&mut r, vec![1, 1, 8]);
    let score = |m: usize, n: usize| {
        let a = rope_single(&q, &[m], 10000.0).unwrap();
        let b = rope_single(&k, &[n], 10000.0).unwrap();
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    assert!((score(5, 2) - score(13, 10)).abs() < 1e-12);
    assert!((score(0, 0) - score(40, 40)).abs() < 1e-12);
    assert!(rope_single(&Tensor::<f64>::zeros(vec![1, 1, 3]), &[0], 1e4).is_err());
}

#[test]
fn a_cross_hand_case() {
    let m = build_a_cross(&[0.9, 0.5, 0.25]);
    let want = [1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.125, 0.25, 1.0];
    assert_eq!(m.data(), &want);
}

#[test]
fn scan_matches_hand_recurrence() {
    let mut r = rng(3);
    let inp = random_ssm(&mut r, 9, 2, 3, 2);
    let h0 = SsmState { h: rand_tensor(&mut r, vec![2, 3, 2]) };
    let (y, fin) = ssm_scan(&inp, Some(&h0)).unwrap();
    for hi in 0..2 {
        let mut h = [[0.0f64; 2]; 3];
        for (n, row) in h.iter_mut().enumerate() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = h0.h.get(&[hi, n, d]);
            }
        }
        for t in 0..9 {
            let a = inp.decay.get(&[t, hi]);
            let dt = inp.dt.get(&[t, hi]);
            for (n, row) in h.iter_mut().enumerate() {
                for (d, v) in row.iter_mut().enumerate() {
                    *v = a * *v + inp.b.get(&[t, hi, n]) * dt * inp.x.get(&[t, hi, d]);
                }
            }
            for d in 0..2 {
                let want: f64 = (0..3).map(|n| inp.c.get(&[t, hi, n]) * h[n][d]).sum();
                assert!((y.get(&[t, hi, d]) - want).abs() < 1e-12);
            }
        }
        for (n, row) in h.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                assert!((fin.h.get(&[hi, n, d]) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn converter_matches_explicit_sum() {
    let mut r = rng(4);
    let inp = random_ssm(&mut r, 6, 2, 3, 4);
    let got = convert(&inp.b, &inp.x, &inp.dt, &inp.decay, &ConverterConfig::default(), None).unwrap();
    for hi in 0..2 {
        for n in 0..3 {
            for d in 0..4 {
                let mut want = 0.0;
                for k in 0..6 {
                    let carry: f64 = (k + 1..6).map(|j| inp.decay.get(&[j, hi])).product();
                    want += carry * inp.b.get(&[k, hi, n]) * inp.dt.get(&[k, hi]) * inp.x.get(&[k, hi, d]);
                }
                assert!((got.h.get(&[hi, n, d]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn converter_without_delta_is_lossy() {
    let mut r = rng(5);
    let inp = random_ssm(&mut r, 8, 1, 2, 2);
    let cfg = ConverterConfig { include_delta: false, ..ConverterConfig::default() };
    let lossy = convert(&inp.b, &inp.x, &inp.dt, &inp.decay, &cfg, None).unwrap();
    let (_, exact) = ssm_scan(&inp, None).unwrap();
    assert!(lossy.h.max_abs_diff(&exact.h).unwrap() > 1e-3);
}

#[test]
fn learned_converter_shapes() {
    let mut r = rng(6);
    let inp = random_ssm(&mut r, 5, 2, 3, 2);
    let (w1, b1) = (rand_tensor(&mut r, vec![6, 4]), rand_tensor(&mut r, vec![4]));
    let (w2, b2) = (rand_tensor(&mut r, vec![4, 6]), rand_tensor(&mut r, vec![6]));
    let w = MlpConverterWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 };
    let cfg = ConverterConfig { mode: ConverterMode::LearnedMlp, ..ConverterConfig::default() };
    let s = convert(&inp.b, &inp.x, &inp.dt, &inp.decay, &cfg, Some(&w)).unwrap();
    assert_eq!(s.h.shape(), &[2, 3, 2]);
    assert!(convert(&inp.b, &inp.x, &inp.dt, &inp.decay, &cfg, None).is_err());
    let empty = SsmInputs {
        c: Tensor::zeros(vec![0, 2, 3]),
        b: Tensor::zeros(vec![0, 2, 3]),
        x: Tensor::zeros(vec![0, 2, 2]),
        dt: Tensor::zeros(vec![0, 2]),
        decay: Tensor::zeros(vec![0, 2]),
    };
    let z = convert(&empty.b, &empty.x, &empty.dt, &empty.decay, &cfg, Some(&w)).unwrap();
    assert_eq!(z.h, SsmState::zeros(2, 3, 2).h);
}

#[test]
fn converter_rejects_mismatched_prefix() {
    let k = Tensor::<f64>::zeros(vec![4, 2, 3]);
    let v = Tensor::<f64>::zeros(vec![5, 2, 3]);
    let dt = Tensor::<f64>::zeros(vec![4, 2]);
    match convert(&k, &v, &dt, &dt, &ConverterConfig::default(), None) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![4, 2, 3]);
            assert_eq!(rhs, vec![5, 2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

fn tokens(r: &mut ChaCha8Rng, t: usize, vocab: usize) -> Vec<u32> {
    (0..t).map(|_| r.random_range(0..vocab as u32)).collect()
}

#[test]
fn model_is_causal() {
    let model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    let mut r = rng(7);
    let mut seq = tokens(&mut r, 12, model.cfg.vocab);
    let before = model.forward_with_points(&seq, &[3, 8]).unwrap();
    seq[9] = (seq[9] + 1) % model.cfg.vocab as u32;
    let after = model.forward_with_points(&seq, &[3, 8]).unwrap();
    let v = model.cfg.vocab;
    assert_eq!(before.data()[..9 * v], after.data()[..9 * v]);
    assert_ne!(before.data()[9 * v..], after.data()[9 * v..]);
}

#[test]
fn points_past_the_end_are_clamped() {
    let model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    let mut r = rng(8);
    let seq = tokens(&mut r, 6, model.cfg.vocab);
    let mut tape = transmamba_core::Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let f = model.forward_points(&mut tape, &vars, &[seq.clone()], &[2, 40]).unwrap();
    assert_eq!(f.clamped.len(), 1);
    assert_eq!((f.clamped[0].layer, f.clamped[0].requested, f.clamped[0].used), (1, 40, 6));
    let clamped = model.forward_with_points(&seq, &[2, 6]).unwrap();
    assert_eq!(tape.value(f.logits).data(), clamped.data());
}

#[test]
fn bad_tokens_are_reported() {
    let model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    let err = model.forward_with_points(&[1, 2, 99], &[1, 1]).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { token: 99, position: 2, .. }));
    assert!(model.forward_with_points(&[1, 2], &[1]).is_err());
}

#[test]
fn gating_and_converter_variants_stay_degenerate() {
    let mut r = rng(9);
    for z in [ZGating::SiluGate, ZGating::None, ZGating::GlobalH, ZGating::GlobalResidual] {
        for mode in [ConverterMode::Theoretical, ConverterMode::LearnedMlp] {
            let mut cfg = ModelConfig::tiny();
            cfg.z_gating = z;
            cfg.converter.mode = mode;
            cfg.converter.mlp_hidden = 8;
            let model = Model::<f64>::new(cfg, 5).unwrap();
            let seq = tokens(&mut r, 10, model.cfg.vocab);
            let mamba = reference_forward(&model, &seq, Mechanism::Ssm).unwrap();
            let attn = reference_forward(&model, &seq, Mechanism::Attention).unwrap();
            assert_eq!(model.forward_with_points(&seq, &[0, 0]).unwrap(), mamba);
            assert_eq!(model.forward_with_points(&seq, &[10, 10]).unwrap(), attn);
            assert!(model.forward_with_points(&seq, &[4, 7]).unwrap().all_finite());
        }
    }
}

#[test]
fn learned_converter_generation_matches_forward() {
    let mut cfg = ModelConfig::tiny();
    cfg.converter.mode = ConverterMode::LearnedMlp;
    cfg.converter.mlp_hidden = 8;
    let model = Model::<f64>::new(cfg, 8).unwrap();
    let schedule = preset("v8", 12).unwrap();
    let out = generate(&model, &[1, 2, 3, 4], 8, &schedule).unwrap();
    for i in 4..out.len() {
        let logits = model.forward(&out[..i], &schedule).unwrap();
        let last = &logits.data()[(i - 1) * model.cfg.vocab..i * model.cfg.vocab];
        let best = (0..last.len()).fold(0, |b, j| if last[j] > last[b] { j } else { b });
        assert_eq!(best as u32, out[i]);
    }
    assert_eq!(generate(&model, &[1, 2], 0, &schedule).unwrap(), vec![1, 2]);
}
