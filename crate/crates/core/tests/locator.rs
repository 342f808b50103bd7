use dpd_core::locator::{binarize_hard, LocatorConfig, LocatorOutput, LocatorParams, ThresholdMode};
use dpd_core::scene::{sample_scenes, source_spec};
use dpd_core::{ParamSet, Tensor};
use proptest::prelude::*;

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut s = seed | 1;
    let data = (0..3 * h * w)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(vec![3, h, w], data).unwrap()
}

fn values(p: &dyn ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |q| out.extend_from_slice(q.value.data()));
    out
}

#[test]
fn hard_map_follows_the_comparison_on_real_outputs() {
    let cfg = LocatorConfig::default();
    let params = LocatorParams::new(4);
    for scene in sample_scenes(&source_spec(), 1, 5).unwrap() {
        let out = params.forward(&scene.image, &cfg).unwrap();
        for ((&c, &t), &b) in out.confidence.data().iter().zip(out.threshold.data()).zip(out.binary_hard.data()) {
            assert_eq!(b == 1.0, c >= t);
        }
        let dpd = params.forward_dpd_threshold(&scene.image, &cfg).unwrap();
        for ((&c, &t), &b) in dpd
            .momentum_confidence
            .data()
            .iter()
            .zip(dpd.threshold.threshold.data())
            .zip(dpd.binary_hard.data())
        {
            assert_eq!(b == 1.0, c >= t);
        }
    }
}

#[test]
fn fixed_threshold_mode_yields_constant_map() {
    let cfg = LocatorConfig {
        threshold_mode: ThresholdMode::Fixed(0.3),
        ..LocatorConfig::default()
    };
    let out = LocatorParams::new(2).forward(&image(5, 16, 16), &cfg).unwrap();
    assert!(out.threshold.data().iter().all(|&t| t == 0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binarize_hard_is_inclusive_comparison(c in prop::collection::vec(0.0f64..1.0, 1..64), shift in -0.5f64..0.5) {
        let n = c.len();
        let t: Vec<f64> = c.iter().enumerate().map(|(i, v)| if i % 3 == 0 { *v } else { v + shift }).collect();
        let ct = Tensor::new(vec![1, 1, n], c.clone()).unwrap();
        let tt = Tensor::new(vec![1, 1, n], t.clone()).unwrap();
        let out = LocatorOutput::from_maps(ct.clone(), tt.clone(), 0.1).unwrap();
        prop_assert_eq!(&out.binary_hard, &binarize_hard(&ct, &tt).unwrap());
        for i in 0..n {
            prop_assert_eq!(out.binary_hard.data()[i] == 1.0, c[i] >= t[i]);
            prop_assert!((0.0..=1.0).contains(&out.binary_soft.data()[i]));
        }
    }

    #[test]
    fn thresholds_stay_in_range(seed in any::<u64>(), img in any::<u64>(), side in 1usize..5) {
        let cfg = LocatorConfig::default();
        let s = side * 4;
        let out = LocatorParams::new(seed).forward(&image(img, s, s), &cfg).unwrap();
        prop_assert!(out.threshold.data().iter().all(|&t| t >= cfg.t_lo && t <= cfg.t_hi));
        prop_assert!(out.confidence.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn momentum_update_matches_scalar_formula(seed in any::<u64>(), other in any::<u64>(), mu in 0.0f64..=1.0) {
        let mut params = LocatorParams::new(seed);
        params.momentum = LocatorParams::new(other).main;
        let before = values(&params.momentum);
        let main = values(&params.main);
        params.momentum_update(mu).unwrap();
        let after = values(&params.momentum);
        for ((a, m), h) in after.iter().zip(&before).zip(&main) {
            prop_assert!((a - (mu * m + (1.0 - mu) * h)).abs() <= 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), img in any::<u64>()) {
        let cfg = LocatorConfig::default();
        let x = image(img, 16, 16);
        let a = LocatorParams::new(seed).forward(&x, &cfg).unwrap();
        let b = LocatorParams::new(seed).forward(&x, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn momentum_update_rejects_out_of_range_coefficients() {
    let mut p = LocatorParams::new(0);
    assert!(p.momentum_update(1.5).is_err());
    assert!(p.momentum_update(f64::NAN).is_err());
}
