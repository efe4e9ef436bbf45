//! Randomised invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transmamba_core::converter::{convert, ConverterConfig};
use transmamba_core::dual::{rope_single, ssm_dual, ssm_scan};
use transmamba_core::planner::{efficiency_curve, flops_per_layer, optimal_transpoint, weighted_cost, CostModel};
use transmamba_core::schedule::{preset, scale_position, NAMED};
use transmamba_core::tasks::{gen_task, TaskKind, TaskSpec};
use transmamba_core::train::{clip_grad_norm, TrainConfig};
use transmamba_core::verify::random_ssm;
use transmamba_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dual_equals_scan(seed in any::<u64>(), t in 1usize..24, h in 1usize..3, n in 1usize..6, d in 1usize..5) {
        let inp = random_ssm(&mut ChaCha8Rng::seed_from_u64(seed), t, h, n, d);
        let (y, _) = ssm_scan(&inp, None).unwrap();
        prop_assert!(ssm_dual(&inp).unwrap().max_abs_diff(&y).unwrap() < 1e-10);
    }

    #[test]
    fn split_anywhere_is_lossless(seed in any::<u64>(), t in 2usize..20, cut in 0usize..100) {
        let p = 1 + cut % (t - 1);
        let inp = random_ssm(&mut ChaCha8Rng::seed_from_u64(seed), t, 2, 3, 2);
        let (full, _) = ssm_scan(&inp, None).unwrap();
        let part = |x: &Tensor<f64>, a, b| x.slice_axis(0, a, b).unwrap();
        let h0 = convert(&part(&inp.b, 0, p), &part(&inp.x, 0, p), &part(&inp.dt, 0, p), &part(&inp.decay, 0, p),
            &ConverterConfig::default(), None).unwrap();
        let suffix = transmamba_core::dual::SsmInputs {
            c: part(&inp.c, p, t), b: part(&inp.b, p, t), x: part(&inp.x, p, t),
            dt: part(&inp.dt, p, t), decay: part(&inp.decay, p, t),
        };
        let (y, _) = ssm_scan(&suffix, Some(&h0)).unwrap();
        prop_assert!(y.max_abs_diff(&part(&full, p, t)).unwrap() < 1e-10);
    }

    #[test]
    fn rope_preserves_norm(v in prop::collection::vec(-3.0f64..3.0, 8), pos in 0usize..5000) {
        let x = Tensor::new(vec![1, 1, 8], v).unwrap();
        let y = rope_single(&x, &[pos], 10000.0).unwrap();
        prop_assert!((x.norm_sq() - y.norm_sq()).abs() < 1e-9);
    }

    #[test]
    fn grid_optimum_near_closed_form(n in 1usize..400, ratio in 0.2f64..6.0, t in 1usize..3000) {
        let cm = CostModel::with_ratio(ratio).unwrap();
        let p = optimal_transpoint(t, n, &cm);
        let closed = (ratio * n as f64 / 2.0).clamp(0.0, t as f64);
        prop_assert!((p as f64 - closed).abs() <= 1.0);
        let curve = efficiency_curve(t, n, &cm, 1).unwrap();
        let min = curve.iter().map(|c| c.cost).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(min, weighted_cost(p, t, n, &cm));
    }

    #[test]
    fn equal_weights_follow_raw_flops(p in 0usize..500, extra in 0usize..500, n in 1usize..300) {
        let t = p + extra;
        let cm = CostModel { kappa_attn: 2.0, kappa_ssm: 2.0 };
        prop_assert_eq!(weighted_cost(p, t, n, &cm), 2.0 * flops_per_layer(p, t, n));
    }

    #[test]
    fn scaled_schedules_stay_in_range(t in 8usize..4096) {
        for name in NAMED {
            let s = preset(name, t).unwrap();
            prop_assert!(s.pattern.iter().all(|&p| p <= t));
        }
        let v9 = preset("v9", t).unwrap().pattern;
        prop_assert_eq!(v9[0], 0);
        prop_assert_eq!(v9[7], t);
        prop_assert!(v9.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(scale_position(4096, t) <= t);
    }

    #[test]
    fn cosine_decays_monotonically(steps in 2usize..400, hi in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
        let tc = TrainConfig { initial_lr: hi, min_lr: hi * frac, steps, ..TrainConfig::default() };
        prop_assert!((tc.lr_at(0) - hi).abs() <= 1e-15 * hi);
        prop_assert!((tc.lr_at(steps - 1) - hi * frac).abs() < 1e-9);
        prop_assert!((1..steps).all(|s| tc.lr_at(s) <= tc.lr_at(s - 1)));
    }

    #[test]
    fn clipping_bounds_norm(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut g = vec![Tensor::new(vec![v.len()], v.clone()).unwrap()];
        let before = clip_grad_norm(&mut g, 1.0);
        let after = g[0].norm_sq().sqrt();
        if before > 1.0 {
            prop_assert!((after - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(g[0].data(), &v[..]);
        }
    }

    #[test]
    fn task_batches_are_reproducible(seed in any::<u64>(), len in 8usize..40) {
        let spec = TaskSpec::new(TaskKind::Copy, len, 9);
        prop_assert_eq!(gen_task(&spec, 3, seed).unwrap(), gen_task(&spec, 3, seed).unwrap());
        let recall = TaskSpec::new(TaskKind::AssocRecall, len.max(12), 21).with_entries(4);
        let b = gen_task(&recall, 2, seed).unwrap();
        prop_assert!(b.mask.iter().all(|m| m.iter().filter(|&&x| x).count() == 1));
    }
}
