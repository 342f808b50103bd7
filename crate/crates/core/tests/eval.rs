use std::collections::HashMap;

use dpd_core::eval::{DEFAULT_MIN_AREA, extract_centers, match_points, score_binary, LocalizationMetrics};
use dpd_core::scene::{sample_scenes, ShiftPreset};
use dpd_core::Tensor;
use proptest::prelude::*;

/// Union-find labelling over 4-neighbours; returns sorted (area, row sum, col sum).
fn components_oracle(bits: &[bool], h: usize, w: usize) -> Vec<(usize, f64, f64)> {
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if !bits[k] {
                continue;
            }
            for n in [(i + 1 < h).then(|| k + w), (j + 1 < w).then(|| k + 1)].into_iter().flatten() {
                if bits[n] {
                    let (a, b) = (find(&mut parent, k), find(&mut parent, n));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut acc: HashMap<usize, (usize, f64, f64)> = HashMap::new();
    for k in 0..h * w {
        if bits[k] {
            let r = find(&mut parent, k);
            let e = acc.entry(r).or_default();
            e.0 += 1;
            e.1 += (k / w) as f64;
            e.2 += (k % w) as f64;
        }
    }
    acc.into_values().collect()
}

fn greedy_pairs(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> usize {
    let mut used = vec![false; gt.len()];
    let mut n = 0;
    for p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= radius)
            .min_by(|a, b| {
                let da = (p.0 - a.1 .0).powi(2) + (p.1 - a.1 .1).powi(2);
                let db = (p.0 - b.1 .0).powi(2) + (p.1 - b.1 .1).powi(2);
                da.total_cmp(&db)
            });
        if let Some((j, _)) = best {
            used[j] = true;
            n += 1;
        }
    }
    n
}

fn pts(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 0..max)
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_harmonic(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = LocalizationMetrics::from_counts(tp, fp, fn_);
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
        if m.precision > 0.0 && m.recall > 0.0 {
            let h = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
            prop_assert!((m.f1 - h).abs() <= 1e-12);
        }
    }

    #[test]
    fn matching_is_at_least_greedy(pred in pts(12), gt in pts(12), radius in 0.5f64..4.0) {
        let m = match_points(&pred, &gt, radius).unwrap();
        prop_assert!(m.tp >= greedy_pairs(&pred, &gt, radius));
        prop_assert_eq!(m.tp + m.fp, pred.len());
        prop_assert_eq!(m.tp + m.fn_, gt.len());
        for &(i, j, d) in &m.pairs {
            let e = ((pred[i].0 - gt[j].0).powi(2) + (pred[i].1 - gt[j].1).powi(2)).sqrt();
            prop_assert!((d - e).abs() <= 1e-12 && d <= radius);
        }
    }

    #[test]
    fn centers_match_union_find_oracle(
        bits in prop::collection::vec(prop::bool::weighted(0.35), 1..=144),
        w in 1usize..=12,
        min_area in 1usize..4,
    ) {
        let h = bits.len().div_ceil(w);
        let mut cells = bits.clone();
        cells.resize(h * w, false);
        let map = Tensor::new(vec![1, h, w], cells.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut got = extract_centers(&map, min_area).unwrap();
        let mut want: Vec<(f64, f64)> = components_oracle(&cells, h, w)
            .into_iter()
            .filter(|c| c.0 >= min_area)
            .map(|(a, r, c)| (r / a as f64, c / a as f64))
            .collect();
        let key = |a: &(f64, f64), b: &(f64, f64)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1));
        got.sort_by(key);
        want.sort_by(key);
        prop_assert_eq!(got.len(), want.len());
        for (g, e) in got.iter().zip(&want) {
            prop_assert!((g.0 - e.0).abs() <= 1e-12 && (g.1 - e.1).abs() <= 1e-12);
        }
    }
}

#[test]
fn ground_truth_maps_score_perfectly() {
    for preset in ShiftPreset::ALL {
        let (s, t) = preset.specs();
        for spec in [s, t] {
            for scene in sample_scenes(&spec, 31, 20).unwrap() {
                let score = score_binary(&scene.gt_binary, &scene, DEFAULT_MIN_AREA).unwrap();
                assert_eq!((score.fp, score.fn_), (0, 0), "{}", preset);
            }
        }
    }
}
