//! Localization scoring and distribution statistics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locator::{irrationality_rate, Locator, LocatorConfig};
use crate::math;
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::theory;

/// Components smaller than this many pixels are discarded as noise.
pub const DEFAULT_MIN_AREA: usize = 2;

/// Centroids `(row, col)` of the 4-connected foreground components of a
/// `[1, H, W]` binary map with at least `min_area` pixels, in raster order of
/// each component's first pixel.
pub fn extract_centers(binary: &Tensor, min_area: usize) -> Result<Vec<(f64, f64)>> {
    let (c, h, w) = binary.dims3()?;
    if c != 1 {
        return Err(Error::Shape {
            op: "extract_centers",
            axes: "C",
            detail: alloc::format!("expected one channel, got {}", c),
        });
    }
    let data = binary.data();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut centers = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] < 0.5 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sr, mut sc) = (0usize, 0.0, 0.0);
        while let Some(idx) = stack.pop() {
            let (i, j) = (idx / w, idx % w);
            area += 1;
            sr += i as f64;
            sc += j as f64;
            let mut push = |n: usize| {
                if !seen[n] && data[n] >= 0.5 {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if i > 0 {
                push(idx - w);
            }
            if i + 1 < h {
                push(idx + w);
            }
            if j > 0 {
                push(idx - 1);
            }
            if j + 1 < w {
                push(idx + 1);
            }
        }
        if area >= min_area {
            centers.push((sr / area as f64, sc / area as f64));
        }
    }
    Ok(centers)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(pred_idx, gt_idx, distance)`
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Offset that makes any admissible pair cheaper than leaving both unmatched,
/// so the assignment first maximizes the number of pairs, then minimizes the
/// summed distance.
const PAIR_BONUS: f64 = 1e6;

/// Minimum-cost assignment on a square matrix (Kuhn-Munkres with potentials).
/// Returns `assign[row] = col`.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-indexed potentials and matching, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[inline]
fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (a.0 - b.0, a.1 - b.1);
    math::sqrt(dr * dr + dc * dc)
}

/// One-to-one matching with a per-ground-truth radius. Among all matchings
/// that only pair points within the radius, returns one with the most pairs
/// and, among those, the smallest total distance.
pub fn match_points_with_radii(pred: &[(f64, f64)], gt: &[(f64, f64)], radii: &[f64]) -> Result<MatchResult> {
    if radii.len() != gt.len() {
        return Err(Error::Config(alloc::format!("{} radii for {} ground-truth points", radii.len(), gt.len())));
    }
    if radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Config("match radius must be > 0".into()));
    }
    let n = pred.len().max(gt.len());
    let mut pairs = Vec::new();
    if n > 0 && !pred.is_empty() && !gt.is_empty() {
        let mut cost = vec![0.0; n * n];
        for (i, &p) in pred.iter().enumerate() {
            for (j, &g) in gt.iter().enumerate() {
                let d = dist(p, g);
                if d <= radii[j] {
                    cost[i * n + j] = d - PAIR_BONUS;
                }
            }
        }
        let assign = hungarian(&cost, n);
        for (i, &j) in assign.iter().enumerate() {
            if i < pred.len() && j < gt.len() {
                let d = dist(pred[i], gt[j]);
                if d <= radii[j] {
                    pairs.push((i, j, d));
                }
            }
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs,
    })
}

/// [`match_points_with_radii`] with one shared radius.
pub fn match_points(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> Result<MatchResult> {
    match_points_with_radii(pred, gt, &vec![radius; gt.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LocalizationMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// `(precision, recall, f1)` of one match.
pub fn localization_metrics(m: &MatchResult) -> (f64, f64, f64) {
    let r = LocalizationMetrics::from_counts(m.tp, m.fp, m.fn_);
    (r.precision, r.recall, r.f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Linear-interpolation quantile (`(n - 1) q` position) of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn distribution_stats(values: &[f64]) -> Result<DistributionStats> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("distribution_stats of an empty list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(DistributionStats {
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        mean: math::mean(values),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        n: values.len(),
    })
}

/// Per-scene counts of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Everything measured on one domain's test scenes with frozen parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub metrics: LocalizationMetrics,
    pub per_scene: Vec<SceneScore>,
    /// Confidences at ground-truth-positive pixels.
    pub positive_confidences: Vec<f64>,
    /// Thresholds at ground-truth-positive pixels.
    pub positive_thresholds: Vec<f64>,
    /// Mean pixelwise 0-1 error of the hard binary map.
    pub pixel_error: f64,
    pub irrationality: f64,
    pub mcu: f64,
}

/// Scores `locator` on `scenes`. Predictions are matched against each head
/// using that head's radius; precision/recall/F1 are micro-averaged.
pub fn evaluate(locator: &Locator, cfg: &LocatorConfig, scenes: &[Scene], min_area: usize) -> Result<DomainEval> {
    let mut per_scene = Vec::with_capacity(scenes.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut confs = Vec::new();
    let mut thrs = Vec::new();
    let mut irr = 0.0;
    for scene in scenes {
        let out = locator.predict(&scene.image, cfg)?;
        let score = score_binary(&out.binary_hard, scene, min_area)?;
        tp += score.tp;
        fp += score.fp;
        fn_ += score.fn_;
        per_scene.push(score);
        irr += irrationality_rate(&out, &scene.gt_binary)?;
        for ((&g, &c), &t) in scene.gt_binary.data().iter().zip(out.confidence.data()).zip(out.threshold.data()) {
            if g == 1.0 {
                confs.push(c);
                thrs.push(t);
            }
        }
    }
    let n = scenes.len().max(1) as f64;
    let mcu = if confs.is_empty() { 0.0 } else { theory::monte_carlo_uncertainty(&confs)? };
    Ok(DomainEval {
        metrics: LocalizationMetrics::from_counts(tp, fp, fn_),
        per_scene,
        positive_confidences: confs,
        positive_thresholds: thrs,
        // the irrationality rate is the 0-1 pixel error of the hard map
        pixel_error: irr / n,
        irrationality: irr / n,
        mcu,
    })
}

/// Matches the components of a binary map against a scene's heads.
pub fn score_binary(binary: &Tensor, scene: &Scene, min_area: usize) -> Result<SceneScore> {
    let pred = extract_centers(binary, min_area)?;
    let gt: Vec<(f64, f64)> = scene.points.iter().map(|p| (p.row as f64, p.col as f64)).collect();
    let radii: Vec<f64> = scene.points.iter().map(|p| p.radius).collect();
    let m = match_points_with_radii(&pred, &gt, &radii)?;
    Ok(SceneScore {
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
    })
}
