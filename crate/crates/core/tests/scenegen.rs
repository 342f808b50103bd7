use dpd_core::scene::{render_binary_map, sample_scenes, source_spec, HeadPoint, ShiftPreset};
use dpd_core::theory::{domain_features, proxy_a_distance};
use proptest::prelude::*;

const N: usize = 2000;

#[test]
fn spec_against_itself_is_indistinguishable() {
    let spec = source_spec();
    let a = domain_features(&spec, 11, N).unwrap();
    let b = domain_features(&spec, 12, N).unwrap();
    let d = proxy_a_distance(&a, &b, 0).unwrap().value;
    assert!(d <= 0.2, "self distance {}", d);
}

#[test]
fn every_preset_target_is_separable_from_source() {
    let src = domain_features(&source_spec(), 21, N).unwrap();
    for (i, preset) in ShiftPreset::ALL.into_iter().enumerate() {
        let (_, target) = preset.specs();
        let tgt = domain_features(&target, 100 + i as u64, N).unwrap();
        let d = proxy_a_distance(&src, &tgt, 1).unwrap().value;
        assert!(d > 0.5, "{} distance {}", preset, d);
    }
}

#[test]
fn images_stay_in_unit_range_on_every_domain() {
    for preset in ShiftPreset::ALL {
        let (s, t) = preset.specs();
        for spec in [s, t, preset.midpoint()] {
            for scene in sample_scenes(&spec, 3, 20).unwrap() {
                assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", preset);
            }
        }
    }
}

#[test]
fn ground_truth_map_depends_only_on_points() {
    for preset in ShiftPreset::ALL {
        let (_, t) = preset.specs();
        for scene in sample_scenes(&t, 9, 10).unwrap() {
            let size = (scene.height(), scene.width());
            assert_eq!(render_binary_map(&scene.points, size).unwrap(), scene.gt_binary);
        }
    }
}

fn points() -> impl Strategy<Value = Vec<HeadPoint>> {
    prop::collection::vec((0usize..24, 0usize..24, 0.5f64..4.0), 0..8)
        .prop_map(|v| v.into_iter().map(|(row, col, radius)| HeadPoint { row, col, radius }).collect())
}

proptest! {
    #[test]
    fn rendered_map_is_binary_and_covers_centers(pts in points()) {
        let map = render_binary_map(&pts, (24, 24)).unwrap();
        prop_assert!(map.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for p in &pts {
            prop_assert_eq!(map.data()[p.row * 24 + p.col], 1.0);
        }
        prop_assert_eq!(render_binary_map(&pts, (24, 24)).unwrap(), map);
    }

    #[test]
    fn rendered_map_is_order_independent(pts in points()) {
        let mut rev = pts.clone();
        rev.reverse();
        prop_assert_eq!(render_binary_map(&pts, (24, 24)).unwrap(), render_binary_map(&rev, (24, 24)).unwrap());
    }
}
