//! Training loop: supervised source loss, momentum consistency and the
//! proxy-domain branch.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locator::{LocatorConfig, LocatorParams, LocatorTrace, OutputGrads, ThresholdMode};
use crate::losses::{consistency_loss, dpd_loss, erm_loss, Adam, AdamConfig, LossBreakdown, LossWeights};
use crate::math;
use crate::scene::Scene;
use crate::tensor::{ParamSet, Tensor};

/// Drop probability of the dropout proxy.
pub const DROPOUT_P: f64 = 0.3;
/// Maximum relative brightness, contrast and saturation change of the
/// color-jitter proxy.
pub const JITTER_STRENGTH: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Pixel noise on the momentum crop.
    InputGauss,
    /// Feature noise scaled by the feature RMS.
    EmbedGauss,
    /// Random brightness, contrast and saturation on the momentum crop.
    ColorJitter,
    /// Inverted dropout on the momentum features.
    McDropout,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::InputGauss,
        PerturbationKind::EmbedGauss,
        PerturbationKind::ColorJitter,
        PerturbationKind::McDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::InputGauss => "input_gauss",
            PerturbationKind::EmbedGauss => "embed_gauss",
            PerturbationKind::ColorJitter => "color_jitter",
            PerturbationKind::McDropout => "mc_dropout",
        }
    }

    /// Noise-level grid averaged in reports; a single nominal level for the
    /// kinds without a noise scale.
    pub fn sigmas(self) -> &'static [f64] {
        match self {
            PerturbationKind::InputGauss | PerturbationKind::EmbedGauss => &[0.1, 0.2, 0.5],
            PerturbationKind::ColorJitter => &[JITTER_STRENGTH],
            PerturbationKind::McDropout => &[DROPOUT_P],
        }
    }
}

impl core::str::FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind '{}'", s)))
    }
}

fn default_true() -> bool {
    true
}

/// Training paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    /// Supervised source loss only, learned threshold.
    BaselineErm,
    /// Supervised source loss with a constant threshold map.
    FixedThreshold { threshold: f64 },
    /// Supervised loss plus momentum consistency on a second crop.
    MomentumOnly,
    /// Momentum consistency plus the proxy-domain branch. `strong_loss`
    /// selects Dice + L1 for the branch, otherwise L1 only.
    FullDpd {
        #[serde(default = "default_true")]
        strong_loss: bool,
    },
    /// Proxy produced by perturbing the momentum model instead of the
    /// dedicated proxy threshold generator.
    Perturbation { perturbation: PerturbationKind, sigma: f64 },
}

impl Variant {
    pub fn name(&self) -> alloc::string::String {
        match self {
            Variant::BaselineErm => "baseline_erm".into(),
            Variant::FixedThreshold { threshold } => format!("fixed_threshold_{}", threshold),
            Variant::MomentumOnly => "momentum_only".into(),
            Variant::FullDpd { strong_loss: true } => "full_dpd".into(),
            Variant::FullDpd { strong_loss: false } => "full_dpd_l1".into(),
            Variant::Perturbation { perturbation, sigma } => format!("{}_{}", perturbation.name(), sigma),
        }
    }

    pub fn uses_momentum(&self) -> bool {
        !matches!(self, Variant::BaselineErm | Variant::FixedThreshold { .. })
    }

    /// Name shared by all noise levels of one perturbation kind.
    pub fn group_name(&self) -> alloc::string::String {
        match self {
            Variant::Perturbation { perturbation, .. } => perturbation.name().into(),
            other => other.name(),
        }
    }

    /// True for the variants that train on a generated proxy domain.
    pub fn has_proxy_branch(&self) -> bool {
        matches!(self, Variant::FullDpd { .. } | Variant::Perturbation { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    /// Scene pairs per step.
    pub batch: usize,
    /// Side of the square training crops; a multiple of 4.
    pub crop: usize,
    /// Supervised-only steps before the momentum twin is synchronized and the
    /// unsupervised terms switch on.
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub mu: f64,
    pub locator: LocatorConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FullDpd { strong_loss: true },
            steps: 2000,
            batch: 8,
            crop: 32,
            warmup_steps: 800,
            adam: AdamConfig::default(),
            mu: 0.99,
            locator: LocatorConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.locator.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.crop == 0 || self.crop % crate::locator::STRIDE != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of 4", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu {} outside [0,1]", self.mu)));
        }
        let w = self.weights;
        if [w.erm, w.consistency, w.dpd].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        match self.variant {
            Variant::FixedThreshold { threshold } if !(0.0..=1.0).contains(&threshold) => {
                Err(Error::Config(format!("fixed threshold {} outside [0,1]", threshold)))
            }
            Variant::Perturbation { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("perturbation sigma {} must be >= 0", sigma)))
            }
            Variant::Perturbation { perturbation: PerturbationKind::McDropout, sigma } if sigma >= 1.0 => {
                Err(Error::Config("dropout probability must be < 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Loss weights after the variant has switched off the terms it does
    /// not use.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.variant.uses_momentum() {
            w.consistency = 0.0;
        }
        if !self.variant.has_proxy_branch() {
            w.dpd = 0.0;
        }
        w
    }

    pub fn effective_locator(&self) -> LocatorConfig {
        let mut cfg = self.locator;
        if let Variant::FixedThreshold { threshold } = self.variant {
            cfg.threshold_mode = ThresholdMode::Fixed(threshold);
        }
        cfg
    }
}

/// Parameters, optimizer state and sampling stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: LocatorParams,
    pub main_opt: Adam,
    pub dpd_opt: Adam,
    /// Completed steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

fn scale_grads(g: &mut OutputGrads, s: f64) {
    g.d_confidence.data_mut().iter_mut().for_each(|v| *v *= s);
    g.d_binary_soft.data_mut().iter_mut().for_each(|v| *v *= s);
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random brightness, contrast and saturation change, clamped to `[0, 1]`.
pub fn color_jitter(image: &Tensor, strength: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let b = 1.0 + rng.random_range(-strength..=strength);
    let k = 1.0 + rng.random_range(-strength..=strength);
    let s = 1.0 + rng.random_range(-strength..=strength);
    let mean = image.mean();
    let mut out = image.clone();
    let plane = h * w;
    for p in 0..plane {
        let gray = (0..c).map(|ch| image.data()[ch * plane + p]).sum::<f64>() / c as f64;
        for ch in 0..c {
            let v = image.data()[ch * plane + p];
            let v = gray + s * (v - gray);
            let v = (v * b - mean) * k + mean;
            out.data_mut()[ch * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: LocatorParams::new(config.seed),
            main_opt: Adam::new(config.adam),
            dpd_opt: Adam::new(config.adam),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_7A11),
            config,
        })
    }

    /// True once the unsupervised terms are active.
    pub fn past_warmup(&self) -> bool {
        self.config.variant.uses_momentum() && self.step >= self.config.warmup_steps
    }

    /// One optimizer step on a batch of crop pairs drawn from `scenes`.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<LossBreakdown> {
        if scenes.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let cfg = self.config.effective_locator();
        let full_w = self.config.effective_weights();
        let unsupervised = self.past_warmup();
        if unsupervised && self.step == self.config.warmup_steps {
            let main = self.params.main.clone();
            self.params.momentum.copy_values_from(&main)?;
        }
        let w = if unsupervised {
            full_w
        } else {
            LossWeights { erm: full_w.erm, consistency: 0.0, dpd: 0.0 }
        };
        let b = self.config.batch;
        let crop = self.config.crop;
        let inv_b = 1.0 / b as f64;
        self.params.zero_grad();

        let mut acc = [0.0f64; 5];
        for _ in 0..b {
            let idx = self.rng.random_range(0..scenes.len());
            let x1 = scenes[idx].random_crop(crop, crop, &mut self.rng)?;
            let x2 = scenes[idx].random_crop(crop, crop, &mut self.rng)?;

            let t1 = self.params.main.forward(&x1.image, &cfg)?;
            let ((l2, l1), mut g1) = erm_loss(&t1.output, &x1.gt_binary)?;
            acc[0] += l2;
            acc[1] += l1;
            scale_grads(&mut g1, w.erm * inv_b);
            self.params.main.backward(&t1, &g1, &cfg)?;

            if !unsupervised {
                continue;
            }
            let t2 = self.params.main.forward(&x2.image, &cfg)?;
            let mom = self.params.momentum.forward(&x2.image, &cfg)?;
            let (cons, mut g2) = consistency_loss(&t2.output, &mom.output)?;
            acc[2] += cons;
            scale_grads(&mut g2, w.consistency * inv_b);

            if w.dpd > 0.0 {
                let (dice, l1) = self.proxy_branch(&x2, &t2, &mom, &mut g2, w.dpd * inv_b, &cfg)?;
                acc[3] += dice;
                acc[4] += l1;
            }
            self.params.main.backward(&t2, &g2, &cfg)?;
        }

        self.main_opt.step(&mut self.params.main);
        if unsupervised && matches!(self.config.variant, Variant::FullDpd { .. }) && w.dpd > 0.0 {
            self.dpd_opt.step(&mut self.params.dpd_threshold);
        }
        if unsupervised {
            self.params.momentum_update(self.config.mu)?;
        }
        self.step += 1;
        let a: Vec<f64> = acc.iter().map(|v| v * inv_b).collect();
        Ok(LossBreakdown::new(a[0], a[1], a[2], a[3], a[4], w))
    }

    /// Proxy-domain term on the second crop. Adds the main model's share of
    /// the gradient to `g_main` and, for the dedicated generator, accumulates
    /// its gradient directly. Returns `(dice, l1)`.
    fn proxy_branch(
        &mut self,
        x2: &Scene,
        main: &LocatorTrace,
        mom: &LocatorTrace,
        g_main: &mut OutputGrads,
        scale: f64,
        cfg: &LocatorConfig,
    ) -> Result<(f64, f64)> {
        match self.config.variant {
            Variant::FullDpd { strong_loss } => {
                let trace = self
                    .params
                    .dpd_from_momentum(&mom.encoder.features, mom.decoder.confidence.clone(), cfg)?;
                let loss = dpd_loss(&main.output.binary_soft, &trace.binary_soft, strong_loss)?;
                g_main.d_binary_soft.add_scaled(&loss.grad_a, scale)?;
                self.params.backward_dpd(&trace, &loss.grad_b.scale(scale), cfg)?;
                Ok((loss.dice, loss.l1))
            }
            Variant::Perturbation { perturbation, sigma } => {
                let proxy = self.perturbed_momentum(&x2.image, perturbation, sigma, cfg)?;
                let loss = dpd_loss(&main.output.binary_soft, &proxy, true)?;
                g_main.d_binary_soft.add_scaled(&loss.grad_a, scale)?;
                Ok((loss.dice, loss.l1))
            }
            _ => Ok((0.0, 0.0)),
        }
    }

    /// Soft binary map of the momentum model under the given perturbation;
    /// treated as a constant target.
    fn perturbed_momentum(&mut self, image: &Tensor, kind: PerturbationKind, sigma: f64, cfg: &LocatorConfig) -> Result<Tensor> {
        let rng = &mut self.rng;
        let momentum = &self.params.momentum;
        let trace = match kind {
            PerturbationKind::InputGauss => {
                let mut noisy = image.clone();
                noisy.data_mut().iter_mut().for_each(|v| *v += sigma * gaussian(rng));
                momentum.forward(&noisy, cfg)?
            }
            PerturbationKind::ColorJitter => momentum.forward(&color_jitter(image, sigma, rng)?, cfg)?,
            PerturbationKind::EmbedGauss => momentum.forward_perturbed(image, cfg, &mut |f| {
                let rms = math::sqrt(f.data().iter().map(|v| v * v).sum::<f64>() / f.len().max(1) as f64);
                f.data_mut().iter_mut().for_each(|v| *v += sigma * rms * gaussian(rng));
            })?,
            PerturbationKind::McDropout => momentum.forward_perturbed(image, cfg, &mut |f| {
                let keep = 1.0 - sigma;
                f.data_mut().iter_mut().for_each(|v| {
                    *v = if rng.random::<f64>() < sigma { 0.0 } else { *v / keep };
                });
            })?,
        };
        Ok(trace.output.binary_soft)
    }

    /// Runs `steps` steps, calling `on_step` after each one with the step
    /// count and its losses.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        steps: usize,
        on_step: &mut dyn FnMut(usize, &Trainer, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let losses = self.train_step(scenes)?;
            on_step(self.step, self, &losses)?;
        }
        Ok(())
    }
}
