mod support;

use kdistill::losses::{
    blkd_loss, contrastive_loss, crkd_loss, drkd_loss, kd_loss, sskd_loss, weighted_cross_entropy, ClassWeights,
    LossWeights, SelfSupervisionBatch,
};
use kdistill::relations::{
    adapt_channels, angle_potential, channel_relation_matrix, distance_potential, softened_probabilities,
    ChannelAdapter,
};
use kdistill::Error;
use proptest::prelude::*;
use support::*;

fn batch(p: Vec<f64>, n: usize, d: usize) -> SelfSupervisionBatch {
    SelfSupervisionBatch { projections: tensor(p, &[n, d]), views: 4, temperature: 0.5 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_matches_loop(b in 1usize..3, k in 1usize..9, side in 1usize..6, seed in any::<u64>()) {
        let f = normal_vec(&mut rng(seed), b * k * side * side, 1.0);
        let got = values(&channel_relation_matrix(&tensor(f.clone(), &[b, k, side, side])).unwrap().values);
        for (g, w) in got.iter().zip(gram_loop(&f, b, k, side * side)) {
            prop_assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
        }
    }

    #[test]
    fn drkd_matches_brute_force(b in 2usize..6, d in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = normal_vec(&mut r, b * d, 1.0);
        let s = normal_vec(&mut r, b * d, 1.0);
        let lw = LossWeights::default();
        let got = scalar(&drkd_loss(&tensor(t.clone(), &[b, d]), &tensor(s.clone(), &[b, d]), &lw).unwrap());
        let rows = |v: &[f64]| v.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let want = drkd_brute(&rows(&t), &rows(&s), lw.lambda_d, lw.lambda_a, lw.huber_delta);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn drkd_is_scale_and_shift_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let (b, d) = (5, 3);
        let t = normal_vec(&mut r, b * d, 1.0);
        let s = normal_vec(&mut r, b * d, 1.0);
        let moved: Vec<f64> = s.iter().map(|v| scale * v + shift).collect();
        let lw = LossWeights::default();
        let tt = tensor(t, &[b, d]);
        let a = scalar(&drkd_loss(&tt, &tensor(s, &[b, d]), &lw).unwrap());
        let c = scalar(&drkd_loss(&tt, &tensor(moved, &[b, d]), &lw).unwrap());
        prop_assert!((a - c).abs() <= 1e-9);
    }

    #[test]
    fn softening_ignores_logit_shift(seed in any::<u64>(), shift in -100.0f64..100.0, temp in 0.2f64..10.0) {
        let z = normal_vec(&mut rng(seed), 12, 4.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let a = values(&softened_probabilities(&tensor(z, &[3, 4]), temp).unwrap().values);
        let b = values(&softened_probabilities(&tensor(shifted, &[3, 4]), temp).unwrap().values);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn kd_is_nonnegative(seed in any::<u64>(), temp in 0.5f64..8.0) {
        let mut r = rng(seed);
        let t = tensor(normal_vec(&mut r, 15, 3.0), &[3, 5]);
        let s = tensor(normal_vec(&mut r, 15, 3.0), &[3, 5]);
        prop_assert!(scalar(&kd_loss(&t, &s, temp).unwrap()) >= -1e-12);
    }

    #[test]
    fn sskd_is_nonnegative_and_zero_on_itself(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = normal_vec(&mut r, 24, 1.0);
        let s = normal_vec(&mut r, 24, 1.0);
        prop_assert!(scalar(&sskd_loss(&batch(t.clone(), 8, 3), &batch(s, 8, 3)).unwrap()) >= -1e-12);
        prop_assert!(scalar(&sskd_loss(&batch(t.clone(), 8, 3), &batch(t, 8, 3)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = tensor(normal_vec(&mut r, 12, 2.0), &[3, 4]);
        let s = normal_vec(&mut r, 12, 2.0);
        let w = ClassWeights::new(vec![0.5, 1.5, 1.2, 0.8]).unwrap();
        let lw = LossWeights::default();
        let err = gradient_error(&s, &[3, 4], |x| blkd_loss(&t, x, &[0, 3, 1], &w, &lw));
        prop_assert!(err <= 1e-6, "{}", err);
        let p = normal_vec(&mut r, 16, 1.0);
        let err = gradient_error(&p, &[8, 2], |x| contrastive_loss(&SelfSupervisionBatch { projections: x.clone(), views: 4, temperature: 0.5 }));
        prop_assert!(err <= 1e-6, "{}", err);
    }
}

#[test]
fn blkd_blends_wce_and_kd() {
    let mut r = rng(1);
    let t = tensor(normal_vec(&mut r, 8, 1.0), &[2, 4]);
    let s = tensor(normal_vec(&mut r, 8, 1.0), &[2, 4]);
    let w = ClassWeights::uniform(4);
    let lw = LossWeights::default();
    let y = [1, 2];
    let blkd = scalar(&blkd_loss(&t, &s, &y, &w, &lw).unwrap());
    let wce = scalar(&weighted_cross_entropy(&s, &y, &w).unwrap());
    let kd = scalar(&kd_loss(&t, &s, lw.temperature).unwrap());
    assert!((blkd - (0.1 * wce + 0.9 * kd)).abs() < 1e-12);
}

#[test]
fn class_weights_balance_counts() {
    let counts = [10, 30, 60];
    let w = ClassWeights::from_counts(&counts, None).unwrap();
    let per_sample = counts.iter().zip(w.as_slice()).map(|(&n, w)| n as f64 * w).sum::<f64>() / 100.0;
    assert!((per_sample - 1.0).abs() < 1e-9);
    assert!(w.as_slice()[0] > w.as_slice()[1] && w.as_slice()[1] > w.as_slice()[2]);
    assert!((w.as_slice()[0] * 10.0 - w.as_slice()[2] * 60.0).abs() < 1e-9);
    let names = vec!["a".to_string(), "b".to_string()];
    let err = ClassWeights::from_counts(&[3, 0], Some(&names)).unwrap_err().to_string();
    assert!(err.contains('b'), "{err}");
}

#[test]
fn coincident_embeddings_are_finite() {
    let e = tensor(vec![1.0, 2.0, 1.0, 2.0, 3.0, -1.0], &[3, 2]);
    let d = distance_potential(&e).unwrap();
    assert!(!d.degenerate);
    let a = angle_potential(&e).unwrap();
    assert!(a.degenerate);
    assert!(values(&a.values).iter().all(|v| v.is_finite()));
    let same = tensor(vec![0.5; 6], &[3, 2]);
    assert!(distance_potential(&same).unwrap().degenerate);
    let lw = LossWeights::default();
    let err = gradient_error(&[0.1, 0.2, 0.1, 0.2, 1.0, -1.0], &[3, 2], |x| drkd_loss(&e, x, &lw));
    assert!(err.is_finite());
}

#[test]
fn identity_adapter_preserves_features() {
    let mut r = rng(2);
    let f = tensor(normal_vec(&mut r, 2 * 3 * 2 * 2, 1.0), &[2, 3, 2, 2]);
    let eye = tensor((0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect(), &[3, 3]);
    let adapter = ChannelAdapter::from_tensors(eye, None).unwrap();
    let out = adapt_channels(&f, &adapter, (2, 2)).unwrap();
    assert_eq!(values(&out), values(&f));
    assert!(scalar(&crkd_loss(&f, &out).unwrap()).abs() < 1e-12);
}

#[test]
fn malformed_inputs_rejected() {
    let lw = LossWeights::default();
    let one = tensor(vec![1.0, 2.0], &[1, 2]);
    assert!(matches!(drkd_loss(&one, &one, &lw), Err(Error::InvalidArgument(_))));
    let a = tensor(vec![0.0; 6], &[2, 3]);
    let b = tensor(vec![0.0; 4], &[2, 2]);
    assert!(matches!(kd_loss(&a, &b, 4.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(kd_loss(&a, &a, 0.0), Err(Error::InvalidArgument(_))));
    let nan = tensor(vec![f64::NAN, 0.0], &[1, 2]);
    assert!(weighted_cross_entropy(&nan, &[0], &ClassWeights::uniform(2)).is_err());
    let odd = SelfSupervisionBatch { projections: tensor(vec![0.0; 6], &[3, 2]), views: 4, temperature: 0.5 };
    assert!(contrastive_loss(&odd).is_err());
}
