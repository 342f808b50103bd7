//! Generalization-bound arithmetic, divergence estimation and the Monte Carlo
//! uncertainty metric.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locator::irrationality_rate;
use crate::math;
use crate::scene::{sample_scene, DomainSpec, Scene, SceneRng};
use crate::train::{TrainConfig, Trainer, Variant};

/// Minimum samples per domain accepted by [`proxy_a_distance`].
pub const MIN_SAMPLES: usize = 100;
/// Gradient steps of the logistic-regression discriminator.
pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.2;
pub const PROBE_L2: f64 = 1e-4;
pub const HELD_OUT_FRACTION: f64 = 0.3;
/// Slack allowed when comparing two divergence estimates.
pub const ESTIMATOR_TOLERANCE: f64 = 0.15;
/// Nominal VC dimension used for locator-level bounds.
pub const NOMINAL_VC_DIM: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub classifier_error: f64,
    pub n_samples_per_domain: usize,
    pub seed: u64,
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < MIN_SAMPLES || b.len() < MIN_SAMPLES {
        return Err(Error::Sampling(format!(
            "need at least {} samples per domain, got {} and {}",
            MIN_SAMPLES,
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Config("feature vectors must share one positive length".into()));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(d)
}

/// Proxy A-distance between two feature sets: a logistic-regression probe is
/// trained to tell them apart on a stratified 70% split and its held-out
/// error `e` gives `2 (1 - 2 e)`, clipped to `[0, 2]`.
pub fn proxy_a_distance(samples_a: &[Vec<f64>], samples_b: &[Vec<f64>], seed: u64) -> Result<DivergenceEstimate> {
    let d = check_samples(samples_a, samples_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<(&[f64], f64)> = Vec::new();
    let mut test: Vec<(&[f64], f64)> = Vec::new();
    for (set, label) in [(samples_a, 0.0), (samples_b, 1.0)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let n_test = (math::round(set.len() as f64 * HELD_OUT_FRACTION) as usize).max(1);
        for (k, &i) in idx.iter().enumerate() {
            let item = (set[i].as_slice(), label);
            if k < n_test {
                test.push(item);
            } else {
                train.push(item);
            }
        }
    }

    // standardize with training statistics
    let n = train.len() as f64;
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in &train {
        for k in 0..d {
            mu[k] += x[k] / n;
        }
    }
    for (x, _) in &train {
        for k in 0..d {
            sd[k] += (x[k] - mu[k]) * (x[k] - mu[k]) / n;
        }
    }
    for s in sd.iter_mut() {
        *s = math::sqrt(*s);
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardize = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mu[k]) / sd[k]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();
    let ytr: Vec<f64> = train.iter().map(|(_, y)| *y).collect();

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..PROBE_STEPS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, &y) in xtr.iter().zip(&ytr) {
            let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = math::sigmoid(z) - y;
            for k in 0..d {
                gw[k] += r * x[k];
            }
            gb += r;
        }
        for k in 0..d {
            w[k] -= PROBE_LR * (gw[k] / n + PROBE_L2 * w[k]);
        }
        bias -= PROBE_LR * gb / n;
    }

    let wrong = test
        .iter()
        .filter(|(x, y)| {
            let xs = standardize(x);
            let z = bias + xs.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let pred = if z >= 0.0 { 1.0 } else { 0.0 };
            pred != *y
        })
        .count();
    let err = wrong as f64 / test.len() as f64;
    Ok(DivergenceEstimate {
        value: (2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0),
        classifier_error: err,
        n_samples_per_domain: samples_a.len().min(samples_b.len()),
        seed,
    })
}

/// `4 sqrt((2 d ln(2m) + ln(2 / delta)) / m)`.
pub fn vc_complexity_term(m: u64, d: u64, delta: f64) -> Result<f64> {
    if m < 1 || d < 1 {
        return Err(Error::Config(format!("vc term needs m >= 1 and d >= 1, got m={} d={}", m, d)));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta {} outside (0,1)", delta)));
    }
    let m = m as f64;
    let d = d as f64;
    Ok(4.0 * math::sqrt((2.0 * d * math::ln(2.0 * m) + math::ln(2.0 / delta)) / m))
}

/// Inputs shared by both bound right-hand sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub source_risk: f64,
    pub proxy_risk: f64,
    pub div_st: f64,
    pub div_pt: f64,
    pub gamma: f64,
    pub m_s: u64,
    pub m_p: u64,
    pub vc_dim: u64,
    pub delta: f64,
    /// Joint-risk estimate used by the source-only bound.
    pub lambda_hat: f64,
    /// Joint-risk estimate used by the proxy bound.
    pub lambda_gamma: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{} = {} outside [0,1]", name, v)))
            }
        };
        unit(self.source_risk, "source_risk")?;
        unit(self.proxy_risk, "proxy_risk")?;
        unit(self.gamma, "gamma")?;
        for (v, name) in [(self.div_st, "div_st"), (self.div_pt, "div_pt")] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Config(format!("{} = {} outside [0,2]", name, v)));
            }
        }
        if !(self.lambda_hat >= 0.0 && self.lambda_gamma >= 0.0) {
            return Err(Error::Config("joint-risk estimates must be >= 0".into()));
        }
        Ok(())
    }
}

/// `R_S + div_st / 2 + vc(m_s) + lambda`.
pub fn erm_bound_rhs(b: &BoundInputs) -> Result<f64> {
    let vc = vc_complexity_term(b.m_s, b.vc_dim, b.delta)?;
    Ok((b.source_risk + 0.5 * b.div_st) + vc + b.lambda_hat)
}

/// `g (R_S + div_st / 2) + (1 - g)(R_P + div_pt / 2) + vc(m_s + m_p) + lambda_g`.
///
/// Summed in the same order as [`erm_bound_rhs`], so `g = 1, m_p = 0` and
/// equal joint risks reproduce it bit for bit.
pub fn dpd_bound_rhs(b: &BoundInputs) -> Result<f64> {
    if !(0.0..=1.0).contains(&b.gamma) {
        return Err(Error::Config(format!("gamma {} outside [0,1]", b.gamma)));
    }
    let vc = vc_complexity_term(b.m_s + b.m_p, b.vc_dim, b.delta)?;
    let source = b.source_risk + 0.5 * b.div_st;
    let proxy = b.proxy_risk + 0.5 * b.div_pt;
    Ok((b.gamma * source + (1.0 - b.gamma) * proxy) + vc + b.lambda_gamma)
}

/// Whether mixing in the proxy domain shrinks the divergence term:
/// `g div_st + (1 - g) div_pt < div_st`. Returns `(tighter, div_st - mixture)`.
pub fn thm2_check(div_st: f64, div_pt: f64, gamma: f64) -> (bool, f64) {
    let mixture = gamma * div_st + (1.0 - gamma) * div_pt;
    let margin = div_st - mixture;
    (margin > 0.0, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub source_risk: f64,
    pub proxy_risk: f64,
    pub div_st: f64,
    pub div_pt: f64,
    pub gamma: f64,
    pub m_s: u64,
    pub m_p: u64,
    pub vc_dim: u64,
    pub delta: f64,
    /// Empirical estimate, not a certified infimum.
    pub lambda_hat: f64,
    pub lambda_gamma: f64,
    pub erm_rhs: f64,
    pub dpd_rhs: f64,
    pub thm2_condition_holds: bool,
    pub thm2_margin: f64,
}

impl BoundReport {
    pub fn compute(b: &BoundInputs) -> Result<Self> {
        b.validate()?;
        let (holds, margin) = thm2_check(b.div_st, b.div_pt, b.gamma);
        Ok(Self {
            source_risk: b.source_risk,
            proxy_risk: b.proxy_risk,
            div_st: b.div_st,
            div_pt: b.div_pt,
            gamma: b.gamma,
            m_s: b.m_s,
            m_p: b.m_p,
            vc_dim: b.vc_dim,
            delta: b.delta,
            lambda_hat: b.lambda_hat,
            lambda_gamma: b.lambda_gamma,
            erm_rhs: erm_bound_rhs(b)?,
            dpd_rhs: dpd_bound_rhs(b)?,
            thm2_condition_holds: holds,
            thm2_margin: margin,
        })
    }

    /// `(key, value)` pairs in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, alloc::string::String)> {
        vec![
            ("source_risk", format!("{}", self.source_risk)),
            ("proxy_risk", format!("{}", self.proxy_risk)),
            ("div_st", format!("{}", self.div_st)),
            ("div_pt", format!("{}", self.div_pt)),
            ("gamma", format!("{}", self.gamma)),
            ("m_s", format!("{}", self.m_s)),
            ("m_p", format!("{}", self.m_p)),
            ("vc_dim", format!("{}", self.vc_dim)),
            ("delta", format!("{}", self.delta)),
            ("lambda_hat_estimate", format!("{}", self.lambda_hat)),
            ("lambda_gamma_estimate", format!("{}", self.lambda_gamma)),
            ("erm_rhs", format!("{}", self.erm_rhs)),
            ("dpd_rhs", format!("{}", self.dpd_rhs)),
            ("thm2_condition_holds", format!("{}", self.thm2_condition_holds)),
            ("thm2_margin", format!("{}", self.thm2_margin)),
        ]
    }
}

/// Mean of `-c ln c` over confidences in `[0, 1]` (`0 ln 0 = 0`).
pub fn monte_carlo_uncertainty(confidences: &[f64]) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::UndefinedMetric("monte_carlo_uncertainty of an empty list"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Config(format!("confidence {} outside [0,1]", c)));
    }
    let total: f64 = confidences
        .iter()
        .map(|&c| if c == 0.0 { 0.0 } else { -c * math::ln(c) })
        .sum();
    Ok(total / confidences.len() as f64)
}

// ---------------------------------------------------------------------------
// image features

/// Number of entries returned by [`image_features`].
pub const IMAGE_FEATURE_DIM: usize = 32;
const HIST_BINS: usize = 8;

fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 32 summary statistics of a `[3, H, W]` image: per channel mean, standard
/// deviation and 10/50/90% quantiles (15), an 8-bin luminance histogram (8),
/// mean absolute horizontal and vertical differences per channel (6), mean
/// absolute Laplacian of luminance (1), and height and width over 64 (2).
pub fn image_features(image: &crate::tensor::Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h < 3 || w < 3 {
        return Err(Error::Shape {
            op: "image_features",
            axes: "C,H,W",
            detail: format!("expected [3, >=3, >=3], got {:?}", image.shape()),
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(IMAGE_FEATURE_DIM);
    for ch in 0..3 {
        let p = &image.data()[ch * plane..(ch + 1) * plane];
        let mut sorted = p.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = p.iter().sum::<f64>() / plane as f64;
        let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
        out.extend([
            m,
            math::sqrt(var),
            quantile_of_sorted(&sorted, 0.1),
            quantile_of_sorted(&sorted, 0.5),
            quantile_of_sorted(&sorted, 0.9),
        ]);
    }
    let lum: Vec<f64> = (0..plane)
        .map(|k| (image.data()[k] + image.data()[plane + k] + image.data()[2 * plane + k]) / 3.0)
        .collect();
    let mut hist = [0.0; HIST_BINS];
    for &v in &lum {
        let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[bin] += 1.0 / plane as f64;
    }
    out.extend(hist);
    for ch in 0..3 {
        let (mut dx, mut dy) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let v = image.at3(ch, i, j);
                if j + 1 < w {
                    dx += math::abs(image.at3(ch, i, j + 1) - v);
                }
                if i + 1 < h {
                    dy += math::abs(image.at3(ch, i + 1, j) - v);
                }
            }
        }
        out.push(dx / (h * (w - 1)) as f64);
        out.push(dy / ((h - 1) * w) as f64);
    }
    let mut lap = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let l = |a: usize, b: usize| lum[a * w + b];
            lap += math::abs(4.0 * l(i, j) - l(i - 1, j) - l(i + 1, j) - l(i, j - 1) - l(i, j + 1));
        }
    }
    out.push(lap / ((h - 2) * (w - 2)) as f64);
    out.push(h as f64 / 64.0);
    out.push(w as f64 / 64.0);
    debug_assert_eq!(out.len(), IMAGE_FEATURE_DIM);
    Ok(out)
}

/// Image features of `n` fresh scenes from `spec`.
pub fn domain_features(spec: &DomainSpec, seed: u64, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = SceneRng::for_spec(spec, seed);
    (0..n).map(|_| image_features(&sample_scene(spec, &mut rng)?.image)).collect()
}

/// Result of one mixture-divergence comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub div_st: f64,
    pub div_pt: f64,
    pub holds: bool,
}

/// Estimates `div(mixture, target)` where each mixture sample comes from
/// `spec_s` with probability `gamma`, else from `spec_p`, and compares it
/// against `gamma div_st + (1 - gamma) div_pt` with [`ESTIMATOR_TOLERANCE`]
/// slack. Every domain draws `n` samples on its own seed stream.
pub fn mixture_divergence_check(
    spec_s: &DomainSpec,
    spec_p: &DomainSpec,
    spec_t: &DomainSpec,
    gamma: f64,
    seed: u64,
    n: usize,
) -> Result<MixtureCheck> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {} outside [0,1]", gamma)));
    }
    // distinct seed lanes so no two domains share scene draws
    let lane = |k: u64| seed.wrapping_mul(0x9E37_79B9).wrapping_add(k);
    let fs = domain_features(spec_s, lane(1), n)?;
    let fp = domain_features(spec_p, lane(2), n)?;
    let ft = domain_features(spec_t, lane(3), n)?;
    let ft_mix = domain_features(spec_t, lane(4), n)?;

    let mut pick = ChaCha8Rng::seed_from_u64(lane(5));
    let mut rs = SceneRng::for_spec(spec_s, lane(6));
    let mut rp = SceneRng::for_spec(spec_p, lane(7));
    let mut fm = Vec::with_capacity(n);
    for _ in 0..n {
        let scene = if pick.random::<f64>() < gamma {
            sample_scene(spec_s, &mut rs)?
        } else {
            sample_scene(spec_p, &mut rp)?
        };
        fm.push(image_features(&scene.image)?);
    }

    let div_st = proxy_a_distance(&fs, &ft, lane(8))?.value;
    let div_pt = proxy_a_distance(&fp, &ft, lane(9))?.value;
    let lhs = proxy_a_distance(&fm, &ft_mix, lane(10))?.value;
    let rhs = gamma * div_st + (1.0 - gamma) * div_pt;
    Ok(MixtureCheck {
        lhs,
        rhs,
        div_st,
        div_pt,
        holds: lhs <= rhs + ESTIMATOR_TOLERANCE,
    })
}

/// Mean hard-map pixel error of `trainer`'s main model over `scenes`.
pub fn pixel_risk(trainer: &Trainer, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::UndefinedMetric("pixel_risk over no scenes"));
    }
    let cfg = trainer.config.effective_locator();
    let mut total = 0.0;
    for s in scenes {
        let out = trainer.params.main.predict(&s.image, &cfg)?;
        total += irrationality_rate(&out, &s.gt_binary)?;
    }
    Ok(total / scenes.len() as f64)
}

/// Upper estimate of the ideal joint risk: one locator is trained with the
/// supervised loss on labeled scenes from both domains for `budget.steps`
/// steps, then its source and target pixel risks on fresh scenes are summed.
/// A zero-step budget returns the initial risk sum.
pub fn estimate_lambda(spec_s: &DomainSpec, spec_t: &DomainSpec, budget: &TrainConfig, n_scenes: usize, seed: u64) -> Result<f64> {
    let mut cfg = *budget;
    cfg.variant = Variant::BaselineErm;
    cfg.seed = seed;
    let mut train = crate::scene::sample_scenes(spec_s, seed, n_scenes)?;
    train.extend(crate::scene::sample_scenes(spec_t, seed.wrapping_add(1), n_scenes)?);
    let test_s = crate::scene::sample_scenes(spec_s, seed.wrapping_add(2), n_scenes)?;
    let test_t = crate::scene::sample_scenes(spec_t, seed.wrapping_add(3), n_scenes)?;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..cfg.steps {
        trainer.train_step(&train)?;
    }
    Ok(pixel_risk(&trainer, &test_s)? + pixel_risk(&trainer, &test_t)?)
}
