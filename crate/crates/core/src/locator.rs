//! Confidence/threshold crowd locator.
//!
//! Data flow for one image `x` of shape `[3, H, W]` (H, W divisible by 4):
//!
//! ```text
//! feat  = relu(conv 8->16 /2 (relu(conv 3->8 /2 (x))))            [16, H/4, W/4]
//! conf  = sigmoid(conv 8->1 (up4 (relu(conv 16->8 (feat)))))        [1, H, W]
//! thr   = lo + (hi-lo) * sigmoid(conv 8->1 (up4 (relu(conv 16->8 (feat * pool4(conf))))))
//! soft  = sigmoid((conf - thr) / tau)
//! hard  = [conf >= thr]
//! ```
//!
//! The proxy-domain branch runs a second, independently initialized threshold
//! learner on the momentum model's features and confidence.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::ops::{self, Conv2d};
use crate::tensor::{Param, ParamSet, Tensor};

pub const ENCODER_WIDTHS: (usize, usize) = (8, 16);
pub const HEAD_WIDTH: usize = 8;
/// Spatial reduction of the encoder.
pub const STRIDE: usize = 4;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

/// How the threshold map is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Learned,
    /// Constant map; the threshold learner is bypassed.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocatorConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Temperature of the soft binarization surrogate.
    pub tau: f64,
    pub threshold_mode: ThresholdMode,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            t_lo: 0.05,
            t_hi: 0.95,
            tau: 0.1,
            threshold_mode: ThresholdMode::Learned,
        }
    }
}

impl LocatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= 1.0) {
            return Err(Error::Config(format!("threshold range [{}, {}] invalid", self.t_lo, self.t_hi)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if let ThresholdMode::Fixed(t) = self.threshold_mode {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("fixed threshold {} outside [0,1]", t)));
            }
        }
        Ok(())
    }
}

/// Predicted maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocatorOutput {
    pub confidence: Tensor,
    pub threshold: Tensor,
    pub binary_soft: Tensor,
    pub binary_hard: Tensor,
}

/// Pixelwise `[conf >= thr]`; the comparison is inclusive.
pub fn binarize_hard(confidence: &Tensor, threshold: &Tensor) -> Result<Tensor> {
    confidence.zip_map(threshold, "binarize_hard", |c, t| if c >= t { 1.0 } else { 0.0 })
}

pub fn binarize_soft(confidence: &Tensor, threshold: &Tensor, tau: f64) -> Result<Tensor> {
    confidence.zip_map(threshold, "binarize_soft", |c, t| math::sigmoid((c - t) / tau))
}

impl LocatorOutput {
    pub fn from_maps(confidence: Tensor, threshold: Tensor, tau: f64) -> Result<Self> {
        let binary_soft = binarize_soft(&confidence, &threshold, tau)?;
        let binary_hard = binarize_hard(&confidence, &threshold)?;
        Ok(Self {
            confidence,
            threshold,
            binary_soft,
            binary_hard,
        })
    }
}

// ---------------------------------------------------------------------------
// encoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    pub features: Tensor,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        let (w1, w2) = ENCODER_WIDTHS;
        Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), 3, w1, 3, 2, rng),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), w1, w2, 3, 2, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderTrace> {
        // center pixel values around zero
        let x = x.map(|v| v - INPUT_CENTER);
        let z1 = self.conv1.forward(&x)?;
        let a1 = ops::relu(&z1);
        let z2 = self.conv2.forward(&a1)?;
        let features = ops::relu(&z2);
        Ok(EncoderTrace {
            input: x,
            z1,
            a1,
            z2,
            features,
        })
    }

    pub fn backward(&mut self, t: &EncoderTrace, d_features: &Tensor) -> Result<()> {
        let dz2 = ops::relu_backward(&t.z2, d_features)?;
        let da1 = self.conv2.backward(&t.a1, &dz2)?;
        let dz1 = ops::relu_backward(&t.z1, &da1)?;
        self.conv1.backward(&t.input, &dz1)?;
        Ok(())
    }
}

impl ParamSet for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// shared head: conv -> relu -> up4 -> conv

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct HeadTrace {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    up: Tensor,
    logits: Tensor,
}

impl Head {
    fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), ENCODER_WIDTHS.1, HEAD_WIDTH, 3, 1, rng),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), HEAD_WIDTH, 1, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<HeadTrace> {
        let z1 = self.conv1.forward(x)?;
        let a1 = ops::relu(&z1);
        let up = ops::bilinear_upsample(&a1, STRIDE)?;
        let logits = self.conv2.forward(&up)?;
        Ok(HeadTrace {
            input: x.clone(),
            z1,
            a1,
            up,
            logits,
        })
    }

    fn backward(&mut self, t: &HeadTrace, d_logits: &Tensor) -> Result<Tensor> {
        let d_up = self.conv2.backward(&t.up, d_logits)?;
        let da1 = ops::bilinear_upsample_backward(t.a1.shape(), STRIDE, &d_up)?;
        let dz1 = ops::relu_backward(&t.z1, &da1)?;
        self.conv1.backward(&t.input, &dz1)
    }
}

impl ParamSet for Head {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// decoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    head: HeadTrace,
    pub confidence: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        Self { head: Head::new(prefix, rng) }
    }

    pub fn forward(&self, features: &Tensor) -> Result<DecoderTrace> {
        let head = self.head.forward(features)?;
        let confidence = ops::sigmoid(&head.logits);
        Ok(DecoderTrace { head, confidence })
    }

    /// Returns the gradient with respect to the encoder features.
    pub fn backward(&mut self, t: &DecoderTrace, d_conf: &Tensor) -> Result<Tensor> {
        let d_logits = ops::sigmoid_backward(&t.confidence, d_conf)?;
        self.head.backward(&t.head, &d_logits)
    }
}

impl ParamSet for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// threshold learner

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdNet {
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct ThresholdTrace {
    features: Tensor,
    pooled_conf: Tensor,
    conf_shape: Vec<usize>,
    head: HeadTrace,
    squashed: Tensor,
    pub threshold: Tensor,
}

impl ThresholdNet {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        Self { head: Head::new(prefix, rng) }
    }

    /// Threshold map from features modulated by the (pooled) confidence map.
    pub fn forward(&self, features: &Tensor, confidence: &Tensor, cfg: &LocatorConfig) -> Result<ThresholdTrace> {
        let pooled_conf = ops::avg_pool(confidence, STRIDE)?;
        let modulated = ops::modulate(features, &pooled_conf)?;
        let head = self.head.forward(&modulated)?;
        let squashed = ops::sigmoid(&head.logits);
        let span = cfg.t_hi - cfg.t_lo;
        let threshold = squashed.map(|s| cfg.t_lo + span * s);
        Ok(ThresholdTrace {
            features: features.clone(),
            pooled_conf,
            conf_shape: confidence.shape().to_vec(),
            head,
            squashed,
            threshold,
        })
    }

    /// Returns `(d_features, d_confidence)`.
    pub fn backward(&mut self, t: &ThresholdTrace, d_thr: &Tensor, cfg: &LocatorConfig) -> Result<(Tensor, Tensor)> {
        let d_squashed = d_thr.scale(cfg.t_hi - cfg.t_lo);
        let d_logits = ops::sigmoid_backward(&t.squashed, &d_squashed)?;
        let d_mod = self.head.backward(&t.head, &d_logits)?;
        let (d_feat, d_pooled) = ops::modulate_backward(&t.features, &t.pooled_conf, &d_mod)?;
        let d_conf = ops::avg_pool_backward(&t.conf_shape, STRIDE, &d_pooled)?;
        Ok((d_feat, d_conf))
    }
}

impl ParamSet for ThresholdNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// full hypothesis h = (encoder, decoder, threshold)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Locator {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub threshold: ThresholdNet,
}

/// Everything the backward pass needs from one forward.
#[derive(Debug, Clone)]
pub struct LocatorTrace {
    pub encoder: EncoderTrace,
    pub decoder: DecoderTrace,
    pub threshold: Option<ThresholdTrace>,
    pub output: LocatorOutput,
}

/// Upstream gradients with respect to the locator's outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_confidence: Tensor,
    pub d_binary_soft: Tensor,
}

impl OutputGrads {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            d_confidence: Tensor::zeros(&[1, h, w]),
            d_binary_soft: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn accumulate(&mut self, other: &OutputGrads) -> Result<()> {
        self.d_confidence.add_assign(&other.d_confidence)?;
        self.d_binary_soft.add_assign(&other.d_binary_soft)
    }
}

pub fn check_input(image: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(shape_err("locator", "C", format!("expected 3 input channels, got {}", c)));
    }
    if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(shape_err(
            "locator",
            "H,W",
            format!("spatial size {}x{} must be positive and divisible by {}", h, w, STRIDE),
        ));
    }
    Ok((h, w))
}

/// Chain rule through `soft = sigmoid((c - t) / tau)`: returns `(d_c, d_t)`.
pub fn soft_binarization_backward(binary_soft: &Tensor, d_soft: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    let d_c = binary_soft.zip_map(d_soft, "soft_binarization_backward", |s, g| g * s * (1.0 - s) / tau)?;
    let d_t = d_c.scale(-1.0);
    Ok((d_c, d_t))
}

impl Locator {
    pub fn new<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        Self {
            encoder: Encoder::new(&format!("{prefix}.encoder"), rng),
            decoder: Decoder::new(&format!("{prefix}.decoder"), rng),
            threshold: ThresholdNet::new(&format!("{prefix}.threshold"), rng),
        }
    }

    pub fn forward(&self, image: &Tensor, cfg: &LocatorConfig) -> Result<LocatorTrace> {
        self.forward_perturbed(image, cfg, &mut |_| {})
    }

    /// Forward pass with a hook applied to the encoder features before both
    /// heads see them (used for feature noise and dropout).
    pub fn forward_perturbed(
        &self,
        image: &Tensor,
        cfg: &LocatorConfig,
        perturb: &mut dyn FnMut(&mut Tensor),
    ) -> Result<LocatorTrace> {
        check_input(image)?;
        let mut encoder = self.encoder.forward(image)?;
        perturb(&mut encoder.features);
        let decoder = self.decoder.forward(&encoder.features)?;
        let (threshold, thr_map) = match cfg.threshold_mode {
            ThresholdMode::Learned => {
                let t = self.threshold.forward(&encoder.features, &decoder.confidence, cfg)?;
                let map = t.threshold.clone();
                (Some(t), map)
            }
            ThresholdMode::Fixed(v) => (None, Tensor::full(decoder.confidence.shape(), v)),
        };
        let output = LocatorOutput::from_maps(decoder.confidence.clone(), thr_map, cfg.tau)?;
        Ok(LocatorTrace {
            encoder,
            decoder,
            threshold,
            output,
        })
    }

    pub fn predict(&self, image: &Tensor, cfg: &LocatorConfig) -> Result<LocatorOutput> {
        Ok(self.forward(image, cfg)?.output)
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, trace: &LocatorTrace, grads: &OutputGrads, cfg: &LocatorConfig) -> Result<()> {
        let (d_c_soft, d_t) = soft_binarization_backward(&trace.output.binary_soft, &grads.d_binary_soft, cfg.tau)?;
        let mut d_conf = grads.d_confidence.clone();
        d_conf.add_assign(&d_c_soft)?;
        let mut d_feat = Tensor::zeros_like(&trace.encoder.features);
        if let Some(tt) = &trace.threshold {
            let (df, dc) = self.threshold.backward(tt, &d_t, cfg)?;
            d_feat.add_assign(&df)?;
            d_conf.add_assign(&dc)?;
        }
        let df = self.decoder.backward(&trace.decoder, &d_conf)?;
        d_feat.add_assign(&df)?;
        self.encoder.backward(&trace.encoder, &d_feat)
    }

    /// 32-dim embedding: per-channel mean and standard deviation of the
    /// encoder features.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        check_input(image)?;
        let feats = self.encoder.forward(image)?.features;
        Ok(channel_moments(&feats))
    }
}

pub(crate) fn channel_moments(feats: &Tensor) -> Vec<f64> {
    let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(2 * c);
    for ch in 0..c {
        let plane = &feats.data()[ch * h * w..(ch + 1) * h * w];
        let m = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        out.push(m);
        out.push(math::sqrt(var));
    }
    out
}

impl ParamSet for Locator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
        self.threshold.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.threshold.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// parameter bundle

/// Main hypothesis, proxy-domain threshold generator, and momentum twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatorParams {
    pub main: Locator,
    pub dpd_threshold: ThresholdNet,
    pub momentum: Locator,
}

/// Proxy-domain prediction produced by the DPD threshold generator.
#[derive(Debug, Clone)]
pub struct DpdTrace {
    pub threshold: ThresholdTrace,
    pub momentum_confidence: Tensor,
    pub binary_soft: Tensor,
    pub binary_hard: Tensor,
}

impl LocatorParams {
    /// Fresh parameters. The momentum twin starts as an exact copy of the
    /// main model; the DPD threshold generator is drawn independently.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let main = Locator::new("main", &mut rng);
        let dpd_threshold = ThresholdNet::new("dpd_threshold", &mut rng);
        let mut momentum = main.clone();
        momentum.visit_mut(&mut |p| p.name = p.name.replacen("main.", "momentum.", 1));
        Self {
            main,
            dpd_threshold,
            momentum,
        }
    }

    pub fn forward(&self, image: &Tensor, cfg: &LocatorConfig) -> Result<LocatorOutput> {
        self.main.predict(image, cfg)
    }

    /// Proxy-domain threshold map: the DPD generator applied to the momentum
    /// model's features and confidence, binarized against that confidence.
    pub fn forward_dpd_threshold(&self, image: &Tensor, cfg: &LocatorConfig) -> Result<DpdTrace> {
        check_input(image)?;
        let enc = self.momentum.encoder.forward(image)?;
        let dec = self.momentum.decoder.forward(&enc.features)?;
        self.dpd_from_momentum(&enc.features, dec.confidence, cfg)
    }

    pub fn dpd_from_momentum(&self, features: &Tensor, momentum_confidence: Tensor, cfg: &LocatorConfig) -> Result<DpdTrace> {
        let threshold = self.dpd_threshold.forward(features, &momentum_confidence, cfg)?;
        let binary_soft = binarize_soft(&momentum_confidence, &threshold.threshold, cfg.tau)?;
        let binary_hard = binarize_hard(&momentum_confidence, &threshold.threshold)?;
        Ok(DpdTrace {
            threshold,
            momentum_confidence,
            binary_soft,
            binary_hard,
        })
    }

    /// Accumulates gradients into the DPD generator only; the momentum
    /// features and confidence are treated as constants.
    pub fn backward_dpd(&mut self, trace: &DpdTrace, d_soft: &Tensor, cfg: &LocatorConfig) -> Result<()> {
        let (_, d_t) = soft_binarization_backward(&trace.binary_soft, d_soft, cfg.tau)?;
        self.dpd_threshold.backward(&trace.threshold, &d_t, cfg)?;
        Ok(())
    }

    /// `theta_mo <- mu * theta_mo + (1 - mu) * theta_main` over encoder,
    /// decoder and threshold learner.
    pub fn momentum_update(&mut self, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) || mu.is_nan() {
            return Err(Error::Config(format!("momentum coefficient {} outside [0,1]", mu)));
        }
        let mut main_values = Vec::new();
        self.main.visit(&mut |p| main_values.push(p.value.clone()));
        let mut idx = 0;
        let mut result = Ok(());
        self.momentum.visit_mut(&mut |p| {
            let src = &main_values[idx];
            if src.shape() != p.value.shape() {
                result = Err(shape_err("momentum_update", "param", format!("{} shape mismatch", p.name)));
            } else {
                for (m, &h) in p.value.data_mut().iter_mut().zip(src.data()) {
                    *m = mu * *m + (1.0 - mu) * h;
                }
            }
            idx += 1;
        });
        result
    }
}

impl ParamSet for LocatorParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.main.visit(f);
        self.dpd_threshold.visit(f);
        self.momentum.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.main.visit_mut(f);
        self.dpd_threshold.visit_mut(f);
        self.momentum.visit_mut(f);
    }
}

/// Fraction of pixels whose confidence/threshold ordering contradicts the
/// ground truth: `conf >= thr` on background or `conf < thr` on a head.
pub fn irrationality_rate(output: &LocatorOutput, gt: &Tensor) -> Result<f64> {
    output.confidence.expect_same_shape(gt, "irrationality_rate")?;
    output.threshold.expect_same_shape(gt, "irrationality_rate")?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    let bad = output
        .confidence
        .data()
        .iter()
        .zip(output.threshold.data())
        .zip(gt.data())
        .filter(|((&c, &t), &g)| (c >= t && g == 0.0) || (c < t && g == 1.0))
        .count();
    Ok(bad as f64 / gt.len() as f64)
}
