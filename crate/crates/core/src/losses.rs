//! Training objectives and the Adam update.
//!
//! Every loss returns its value together with gradients with respect to the
//! maps it consumes; callers route those through the locator's backward pass.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locator::{LocatorOutput, OutputGrads};
use crate::math;
use crate::tensor::{ParamSet, Tensor};

/// Guard added to both Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub erm: f64,
    pub consistency: f64,
    pub dpd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            erm: 1.0,
            consistency: 0.5,
            dpd: 0.5,
        }
    }
}

/// Per-step loss terms, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub erm_l2: f64,
    pub erm_l1: f64,
    pub consistency: f64,
    pub dpd_dice: f64,
    pub dpd_l1: f64,
    pub total: f64,
    pub weights: (f64, f64, f64),
}

impl LossBreakdown {
    pub fn new(erm_l2: f64, erm_l1: f64, consistency: f64, dpd_dice: f64, dpd_l1: f64, w: LossWeights) -> Self {
        let total = w.erm * (erm_l2 + erm_l1) + w.consistency * consistency + w.dpd * (dpd_dice + dpd_l1);
        Self {
            erm_l2,
            erm_l1,
            consistency,
            dpd_dice,
            dpd_l1,
            total,
            weights: (w.erm, w.consistency, w.dpd),
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Supervised loss on one image: `(l2, l1)` where `l2` is the mean squared
/// error of the confidence map and `l1` the mean absolute error of the soft
/// binary map, both against the binary ground truth.
pub fn erm_loss(out: &LocatorOutput, gt: &Tensor) -> Result<((f64, f64), OutputGrads)> {
    out.confidence.expect_same_shape(gt, "erm_loss")?;
    let n = gt.len() as f64;
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    let d_confidence = out.confidence.zip_map(gt, "erm_loss", |c, g| {
        l2 += (c - g) * (c - g);
        2.0 * (c - g) / n
    })?;
    let d_binary_soft = out.binary_soft.zip_map(gt, "erm_loss", |s, g| {
        l1 += math::abs(s - g);
        sign(s - g) / n
    })?;
    Ok(((l2 / n, l1 / n), OutputGrads { d_confidence, d_binary_soft }))
}

/// Consistency between the main model and its (detached) momentum twin on the
/// same crop. Gradients are returned for the main model only.
pub fn consistency_loss(main: &LocatorOutput, momentum: &LocatorOutput) -> Result<(f64, OutputGrads)> {
    let n = main.confidence.len() as f64;
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    let d_confidence = main.confidence.zip_map(&momentum.confidence, "consistency_loss", |a, b| {
        l2 += (a - b) * (a - b);
        2.0 * (a - b) / n
    })?;
    let d_binary_soft = main.binary_soft.zip_map(&momentum.binary_soft, "consistency_loss", |a, b| {
        l1 += math::abs(a - b);
        sign(a - b) / n
    })?;
    Ok(((l2 + l1) / n, OutputGrads { d_confidence, d_binary_soft }))
}

/// Value and gradients of the proxy-domain loss.
#[derive(Debug, Clone)]
pub struct DpdLoss {
    pub dice: f64,
    pub l1: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// Dice overlap plus mean absolute difference between two soft binary maps:
///
/// `dice = 1 - (2 sum(a b) + eps) / (sum(a^2) + sum(b^2) + eps)`
///
/// On hard {0,1} maps the squared sums equal the plain sums. The squared form
/// makes the loss vanish exactly when `a == b` and keeps it symmetric. Both
/// maps all-zero gives `dice = 0`. Set `with_dice = false` for the L1-only
/// variant; `dice` is then reported as 0 and contributes no gradient.
pub fn dpd_loss(a: &Tensor, b: &Tensor, with_dice: bool) -> Result<DpdLoss> {
    a.expect_same_shape(b, "dpd_loss")?;
    let n = a.len() as f64;
    let mut l1 = 0.0;
    let mut grad_a = a.zip_map(b, "dpd_loss", |x, y| {
        l1 += math::abs(x - y);
        sign(x - y) / n
    })?;
    let mut grad_b = grad_a.scale(-1.0);
    let mut dice = 0.0;
    if with_dice {
        let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let sq_a: f64 = a.data().iter().map(|x| x * x).sum();
        let sq_b: f64 = b.data().iter().map(|y| y * y).sum();
        let num = 2.0 * inter + DICE_EPS;
        let den = sq_a + sq_b + DICE_EPS;
        dice = 1.0 - num / den;
        // d/dx (1 - num/den) = -(2y den - num 2x) / den^2
        let den2 = den * den;
        for ((ga, gb), (&x, &y)) in grad_a
            .data_mut()
            .iter_mut()
            .zip(grad_b.data_mut().iter_mut())
            .zip(a.data().iter().zip(b.data()))
        {
            *ga += -(2.0 * y * den - num * 2.0 * x) / den2;
            *gb += -(2.0 * x * den - num * 2.0 * y) / den2;
        }
    }
    Ok(DpdLoss { dice, l1: l1 / n, grad_a, grad_b })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {:?}", self)))
        }
    }
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    Skipped,
}

/// Adam with bias correction. Holds one moment pair per parameter tensor of
/// the [`ParamSet`] it is stepped with; the set's layout must not change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub skipped: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            skipped: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First and second moment estimates, one per parameter tensor.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(config: AdamConfig, t: u64, skipped: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Config("Adam moment tensors do not pair up".into()));
        }
        Ok(Self { config, t, skipped, m, v })
    }

    pub fn step(&mut self, params: &mut dyn ParamSet) -> StepOutcome {
        let mut finite = true;
        params.visit(&mut |p| finite &= p.grad.is_finite());
        if !finite {
            self.skipped += 1;
            log::warn!("non-finite gradient, optimizer step skipped ({} so far)", self.skipped);
            return StepOutcome::Skipped;
        }
        if self.m.is_empty() {
            params.visit(&mut |p| {
                self.m.push(Tensor::zeros_like(&p.value));
                self.v.push(Tensor::zeros_like(&p.value));
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - math::powi(beta1, self.t as i32);
        let bc2 = 1.0 - math::powi(beta2, self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_mut(&mut |p| {
            let m = ms[idx].data_mut();
            let v = vs[idx].data_mut();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
            idx += 1;
        });
        StepOutcome::Applied
    }
}
