//! End-to-end acceptance criteria. Runs sequentially so that the timing
//! limits measure the work itself, and prints one line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p dpd-lab --test acceptance -- 2 5`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dpd_core::checks::gradient_suite;
use dpd_core::eval::{distribution_stats, match_points, LocalizationMetrics};
use dpd_core::ops::conv2d;
use dpd_core::scene::{sample_scenes, ShiftPreset};
use dpd_core::theory::{
    dpd_bound_rhs, erm_bound_rhs, mixture_divergence_check, monte_carlo_uncertainty, proxy_a_distance, vc_complexity_term,
    BoundInputs,
};
use dpd_core::train::{PerturbationKind, Variant};
use dpd_core::Tensor;
use dpd_lab::harness::{gt_self_score, perturbation_configs, run_seed, RunOptions};
use dpd_lab::{ExperimentConfig, RunRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Trained runs shared between criteria, keyed by experiment label and seed.
struct Runs {
    root: PathBuf,
    cache: HashMap<(String, u64), RunRecord>,
}

impl Runs {
    fn config(&self, experiment: Variant) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            experiment,
            shift_preset: ShiftPreset::Mixed,
            output_dir: self.root.clone(),
            ..ExperimentConfig::default()
        };
        c.data.extra_presets = ShiftPreset::ALL.to_vec();
        c
    }

    fn get_cfg(&mut self, cfg: &ExperimentConfig, seed: u64) -> RunRecord {
        let key = (cfg.label(), seed);
        if let Some(r) = self.cache.get(&key) {
            return r.clone();
        }
        let r = run_seed(cfg, seed, RunOptions::default()).unwrap_or_else(|e| panic!("{} seed {}: {}", key.0, seed, e));
        eprintln!(
            "    trained {:<20} seed {}: target f1 {:.4} ({:.0} s)",
            r.label,
            seed,
            r.target().metrics.f1,
            r.wall_clock_seconds
        );
        self.cache.insert(key, r.clone());
        r
    }

    fn get(&mut self, experiment: Variant, seed: u64) -> RunRecord {
        let cfg = self.config(experiment);
        self.get_cfg(&cfg, seed)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const BASELINE: Variant = Variant::BaselineErm;
const MOMENTUM: Variant = Variant::MomentumOnly;
const DPD: Variant = Variant::FullDpd { strong_loss: true };
const DPD_L1: Variant = Variant::FullDpd { strong_loss: false };

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, "", 0u64);
    let mut count = 0;
    for seed in 0..10 {
        for c in gradient_suite(seed).expect("gradient suite runs") {
            count += 1;
            if c.report.max_relative_error >= worst.0 {
                worst = (c.report.max_relative_error, c.name, seed);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "{} checks, worst relative error {:.2e} ({} seed {}), {:.1} s",
            count, worst.0, worst.1, worst.2, secs
        ),
    )
}

fn c2_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact = true;
    for _ in 0..1000 {
        let lambda = rng.random_range(0.0..2.0);
        let b = BoundInputs {
            source_risk: rng.random_range(0.0..=1.0),
            proxy_risk: rng.random_range(0.0..=1.0),
            div_st: rng.random_range(0.0..=2.0),
            div_pt: rng.random_range(0.0..=2.0),
            gamma: 1.0,
            m_s: rng.random_range(1..1_000_000),
            m_p: 0,
            vc_dim: rng.random_range(1..200),
            delta: rng.random_range(0.001..0.999),
            lambda_hat: lambda,
            lambda_gamma: lambda,
        };
        exact &= erm_bound_rhs(&b).unwrap().to_bits() == dpd_bound_rhs(&b).unwrap().to_bits();
    }
    let vc = vc_complexity_term(1000, 10, 0.1).unwrap();
    // 4 sqrt((2 d ln 2m + ln(2/delta)) / m), evaluated with std math
    let oracle = 4.0 * ((2.0 * 10.0 * (2.0f64 * 1000.0).ln() + (2.0f64 / 0.1).ln()) / 1000.0).sqrt();
    let vc_ok = (vc - oracle).abs() <= 1e-12;
    let grid: Vec<u64> = (0..50).map(|i| (10.0 * 1e6f64.powf(i as f64 / 49.0)).round() as u64).collect();
    let vals: Vec<f64> = grid.iter().map(|&m| vc_complexity_term(m, 10, 0.1).unwrap()).collect();
    let monotone = grid.windows(2).all(|w| w[1] > w[0]) && vals.windows(2).all(|w| w[1] < w[0]);
    outcome(
        exact && vc_ok && monotone,
        format!(
            "reduction bit-exact on 1000 inputs: {}; vc(1000,10,0.1) = {:.15} vs {:.15}; decreasing on 50-point grid 10..1e7: {}",
            exact, vc, oracle, monotone
        ),
    )
}

fn c3_mixture() -> Outcome {
    let t = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut fails = 0;
    let mut total = 0;
    for preset in ShiftPreset::ALL {
        let (s, tgt) = preset.specs();
        let p = preset.midpoint();
        for gamma in [0.25, 0.5, 0.75] {
            for seed in 0..5 {
                let m = mixture_divergence_check(&s, &p, &tgt, gamma, seed, 200).expect("mixture check runs");
                total += 1;
                worst = worst.max(m.lhs - m.rhs);
                if !m.holds {
                    fails += 1;
                    eprintln!("    {} gamma {} seed {}: lhs {:.3} rhs {:.3}", preset, gamma, seed, m.lhs, m.rhs);
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        fails == 0 && secs < 300.0,
        format!(
            "{}/{} comparisons hold, largest lhs - rhs {:.3} (slack 0.15), {:.1} s",
            total - fails,
            total,
            worst,
            secs
        ),
    )
}

fn c4_divergence() -> Outcome {
    let mut same = f64::NEG_INFINITY;
    for preset in ShiftPreset::ALL {
        let a = dpd_core::theory::domain_features(&preset.specs().1, 40, 200).unwrap();
        same = same.max(proxy_a_distance(&a, &a, 1).unwrap().value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cluster = |rng: &mut ChaCha8Rng, center: f64| -> Vec<Vec<f64>> {
        (0..200).map(|_| (0..8).map(|_| center + rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let a = cluster(&mut rng, -5.0);
    let b = cluster(&mut rng, 5.0);
    let sep = proxy_a_distance(&a, &b, 2).unwrap().value;
    outcome(
        same <= 0.2 && (sep - 2.0).abs() <= 0.05,
        format!("identical sets max {:.3}; separable clusters {:.3}", same, sep),
    )
}

fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1] as i64, x.shape()[2] as i64);
    let (co, ks) = (k.shape()[0], k.shape()[2] as i64);
    let ho = (h + 2 * pad as i64 - ks) / stride as i64 + 1;
    let wo = (w + 2 * pad as i64 - ks) / stride as i64 + 1;
    let mut out = Vec::new();
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for di in 0..ks {
                        for dj in 0..ks {
                            let r = i * stride as i64 + di - pad as i64;
                            let q = j * stride as i64 + dj - pad as i64;
                            if r >= 0 && r < h && q >= 0 && q < w {
                                let xv = x.data()[(c * h as usize + r as usize) * w as usize + q as usize];
                                let kv = k.data()[((o * ci + c) * ks as usize + di as usize) * ks as usize + dj as usize];
                                acc += xv * kv;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Best assignment by enumeration: most pairs within radius, then least
/// total distance.
fn brute_force(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> (usize, f64) {
    fn rec(i: usize, pred: &[(f64, f64)], gt: &[(f64, f64)], used: &mut Vec<bool>, r: f64, acc: (usize, f64), best: &mut (usize, f64)) {
        if i == pred.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        rec(i + 1, pred, gt, used, r, acc, best);
        for g in 0..gt.len() {
            let d = ((pred[i].0 - gt[g].0).powi(2) + (pred[i].1 - gt[g].1).powi(2)).sqrt();
            if !used[g] && d <= r {
                used[g] = true;
                rec(i + 1, pred, gt, used, r, (acc.0 + 1, acc.1 + d), best);
                used[g] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    rec(0, pred, gt, &mut vec![false; gt.len()], radius, (0, 0.0), &mut best);
    best
}

fn c5_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut conv_err = 0.0f64;
    let mut shapes = 0;
    for ci in 1..=3 {
        for co in 1..=3 {
            for h in 1..=8 {
                for w in 1..=8 {
                    for ks in [1, 3] {
                        for stride in 1..=2 {
                            for pad in 0..=1 {
                                if h + 2 * pad < ks || w + 2 * pad < ks {
                                    continue;
                                }
                                let mut rt = |shape: Vec<usize>| {
                                    let n = shape.iter().product();
                                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
                                };
                                let x = rt(vec![ci, h, w]);
                                let k = rt(vec![co, ci, ks, ks]);
                                let b = rt(vec![co]);
                                let got = conv2d(&x, &k, &b, stride, pad).unwrap();
                                let want = conv_oracle(&x, &k, &b, stride, pad);
                                assert_eq!(got.len(), want.len());
                                for (g, e) in got.data().iter().zip(&want) {
                                    conv_err = conv_err.max((g - e).abs());
                                }
                                shapes += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut match_bad = 0;
    let mut instances = 0;
    for np in 0..=6 {
        for ng in 0..=6 {
            for _ in 0..40 {
                let mut pts = |n: usize| -> Vec<(f64, f64)> {
                    (0..n).map(|_| (rng.random_range(0.0..12.0), rng.random_range(0.0..12.0))).collect()
                };
                let pred = pts(np);
                let gt = pts(ng);
                let radius = rng.random_range(1.0..5.0);
                let m = match_points(&pred, &gt, radius).unwrap();
                let (n, cost) = brute_force(&pred, &gt, radius);
                instances += 1;
                if m.tp != n || (m.total_distance() - cost).abs() > 1e-9 || m.fp != np - n || m.fn_ != ng - n {
                    match_bad += 1;
                }
            }
        }
    }

    let mut q_err = 0.0f64;
    for n in 1..60 {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let s = distribution_stats(&v).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (n - 1) as f64 * p;
            let lo = h.floor();
            let frac = h - lo;
            let lo = lo as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        };
        for (got, want) in [(s.q1, q(0.25)), (s.median, q(0.5)), (s.q3, q(0.75)), (s.min, sorted[0]), (s.max, sorted[n - 1])] {
            q_err = q_err.max((got - want).abs());
        }
    }
    outcome(
        conv_err <= 1e-12 && match_bad == 0 && q_err <= 1e-12,
        format!(
            "conv {} shapes max err {:.1e}; matching {}/{} optimal; quantile max err {:.1e}",
            shapes,
            conv_err,
            instances - match_bad,
            instances,
            q_err
        ),
    )
}

fn target_f1(runs: &mut Runs, v: Variant, seeds: std::ops::Range<u64>) -> Vec<f64> {
    seeds.map(|s| runs.get(v, s).target().metrics.f1).collect()
}

fn c6_ablation(runs: &mut Runs) -> Outcome {
    let t = Instant::now();
    let base = mean(&target_f1(runs, BASELINE, 0..5));
    let mom = mean(&target_f1(runs, MOMENTUM, 0..5));
    let dpd = mean(&target_f1(runs, DPD, 0..5));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        dpd > mom && mom > base && dpd - base >= 0.02 && secs < 1800.0,
        format!(
            "mixed target F1 over 5 seeds: baseline {:.4}, momentum {:.4}, full_dpd {:.4} (gap {:+.4}), {:.0} s",
            base,
            mom,
            dpd,
            dpd - base,
            secs
        ),
    )
}

fn c7_mcu(runs: &mut Runs) -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for preset in ShiftPreset::ALL {
        let m = |runs: &mut Runs, v| mean(&(0..3).map(|s| runs.get(v, s).domain(preset.name()).unwrap().mcu).collect::<Vec<_>>());
        let b = m(runs, BASELINE);
        let d = m(runs, DPD);
        all &= d < b;
        parts.push(format!("{} {:.4}/{:.4}", preset, d, b));
    }
    let e = monte_carlo_uncertainty(&[(-1f64).exp()]).unwrap();
    let e_ok = (e - 0.36788).abs() <= 1e-5;
    outcome(
        all && e_ok,
        format!("MCU full_dpd/baseline: {}; MCU(1/e) = {:.6}", parts.join(", "), e),
    )
}

fn c8_perturbation(runs: &mut Runs) -> Outcome {
    let dpd = mean(&target_f1(runs, DPD, 0..3));
    let mut all = true;
    let mut parts = Vec::new();
    for kind in PerturbationKind::ALL {
        let mut f1 = Vec::new();
        for cfg in perturbation_configs(&runs.config(DPD), kind) {
            for seed in 0..3 {
                f1.push(runs.get_cfg(&cfg, seed).target().metrics.f1);
            }
        }
        let m = mean(&f1);
        all &= dpd > m;
        parts.push(format!("{} {:.4}", kind.name(), m));
    }
    outcome(all, format!("full_dpd {:.4} vs {}", dpd, parts.join(", ")))
}

/// First evaluation step at which target F1 reaches 95% of its final value.
fn steps_to_95(r: &RunRecord) -> usize {
    let last = r.curve.last().expect("curve has points").target_f1;
    r.curve.iter().find(|c| c.target_f1 >= 0.95 * last).map(|c| c.step).expect("the final point qualifies")
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn c9_convergence(runs: &mut Runs) -> Outcome {
    let strong: Vec<usize> = (0..3).map(|s| steps_to_95(&runs.get(DPD, s))).collect();
    let l1: Vec<usize> = (0..3).map(|s| steps_to_95(&runs.get(DPD_L1, s))).collect();
    let (ms, ml) = (median(strong.clone()), median(l1.clone()));
    outcome(
        ms <= ml,
        format!("steps to 95% of final target F1: strong {:?} (median {}), L1 only {:?} (median {})", strong, ms, l1, ml),
    )
}

fn c10_consistency(runs: &mut Runs) -> Outcome {
    let mut counts = (0, 0, 0);
    let mut per_scene_perfect = true;
    for (i, preset) in ShiftPreset::ALL.iter().enumerate() {
        let (s, t) = preset.specs();
        for spec in [s, t] {
            for scene in sample_scenes(&spec, 100 + i as u64, 10).unwrap() {
                let sc = gt_self_score(&scene, dpd_core::eval::DEFAULT_MIN_AREA).unwrap();
                per_scene_perfect &= LocalizationMetrics::from_counts(sc.tp, sc.fp, sc.fn_).f1 == 1.0;
                counts.0 += sc.tp;
                counts.1 += sc.fp;
                counts.2 += sc.fn_;
            }
        }
    }
    let f1 = LocalizationMetrics::from_counts(counts.0, counts.1, counts.2).f1;

    let first = runs.get(BASELINE, 0);
    let mut cfg = runs.config(BASELINE);
    cfg.output_dir = runs.root.join("repeat");
    let again = run_seed(&cfg, 0, RunOptions::default()).expect("repeat run");
    let mut worst = 0.0f64;
    for (a, b) in first.domains.iter().zip(&again.domains) {
        for (x, y) in [
            (a.metrics.f1, b.metrics.f1),
            (a.metrics.precision, b.metrics.precision),
            (a.metrics.recall, b.metrics.recall),
            (a.mcu, b.mcu),
            (a.pixel_error, b.pixel_error),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    for (a, b) in first.curve.iter().zip(&again.curve) {
        worst = worst.max((a.target_f1 - b.target_f1).abs());
    }
    worst = worst.max((first.bound.dpd_rhs - again.bound.dpd_rhs).abs());
    let same_shape = first.domains.len() == again.domains.len() && first.curve.len() == again.curve.len();
    let ok = f1 == 1.0 && per_scene_perfect && same_shape && worst <= 1e-9 && first.config_hash == again.config_hash;
    outcome(
        ok,
        format!("ground-truth F1 on 100 scenes = {}; repeat run max metric difference {:.1e}", f1, worst),
    )
}

const NAMES: [&str; 10] = [
    "gradient correctness",
    "bound arithmetic identities",
    "mixture-divergence inequality",
    "divergence estimator sanity",
    "oracle equivalences",
    "ablation trend",
    "uncertainty trend",
    "perturbation comparison",
    "strong-loss convergence",
    "self-consistency and reproducibility",
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).filter(|n| (1..=10).contains(n)).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);

    let dir = tempfile::tempdir().expect("temporary directory");
    let mut runs = Runs {
        root: dir.path().to_path_buf(),
        cache: HashMap::new(),
    };
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut ran = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => c1_gradients(),
            2 => c2_bounds(),
            3 => c3_mixture(),
            4 => c4_divergence(),
            5 => c5_oracles(),
            6 => c6_ablation(&mut runs),
            7 => c7_mcu(&mut runs),
            8 => c8_perturbation(&mut runs),
            9 => c9_convergence(&mut runs),
            _ => c10_consistency(&mut runs),
        };
        ran += 1;
        println!(
            "criterion {:>2} {:<38} {} ({:.0} s): {}",
            n,
            NAMES[n - 1],
            if o.passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed.push(n);
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s{}",
        ran - failed.len(),
        ran,
        started.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {:?}", failed) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
