//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use dpd_core::locator::LocatorConfig;
use dpd_core::losses::{AdamConfig, LossWeights};
use dpd_core::scene::ShiftPreset;
use dpd_core::theory::{MIN_SAMPLES, NOMINAL_VC_DIM};
use dpd_core::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, LabError, Result};

/// Parameters of the generalization-bound report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub vc_dim: u64,
    pub delta: f64,
    /// Source weight of the source/proxy mixture. Used only in reports.
    pub gamma: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            vc_dim: NOMINAL_VC_DIM as u64,
            delta: 0.05,
            gamma: 0.5,
        }
    }
}

/// Dataset sizes and evaluation cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub n_train: usize,
    /// Test scenes per evaluated domain.
    pub n_test: usize,
    /// Scenes per domain fed to the divergence probe.
    pub n_bound: usize,
    pub crop: usize,
    pub warmup_steps: usize,
    /// Steps between target-F1 evaluations for the training curve.
    pub eval_interval: usize,
    pub min_area: usize,
    /// Training steps of the joint-risk estimate; 0 reports the risk of an
    /// untrained model.
    pub lambda_steps: usize,
    /// Target domains evaluated besides the configured shift preset.
    pub extra_presets: Vec<ShiftPreset>,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            n_bound: MIN_SAMPLES,
            crop: 32,
            warmup_steps: 800,
            eval_interval: 100,
            min_area: dpd_core::eval::DEFAULT_MIN_AREA,
            lambda_steps: 200,
            extra_presets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shift_preset: ShiftPreset,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mu: f64,
    pub tau: f64,
    /// `(erm, consistency, dpd)` loss weights.
    pub loss_weights: [f64; 3],
    pub output_dir: PathBuf,
    /// Name used for run directories and report rows; defaults to the
    /// experiment name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub experiment: Variant,
    #[serde(default)]
    pub bound_params: BoundParams,
    #[serde(default)]
    pub data: DataParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            shift_preset: ShiftPreset::Mixed,
            seeds: vec![0, 1, 2],
            steps: t.steps,
            batch: t.batch,
            lr: t.adam.lr,
            mu: t.mu,
            tau: t.locator.tau,
            loss_weights: [t.weights.erm, t.weights.consistency, t.weights.dpd],
            output_dir: PathBuf::from("runs"),
            label: None,
            experiment: t.variant,
            bound_params: BoundParams::default(),
            data: DataParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(msg) => LabError::Config(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        // TOML integers are signed 64-bit
        if let Some(s) = self.seeds.iter().find(|&&s| s > i64::MAX as u64) {
            return Err(LabError::Config(format!("seed {} exceeds {}", s, i64::MAX)));
        }
        if self.steps == 0 {
            return Err(LabError::Config("steps must be >= 1".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(LabError::Config("n_train and n_test must be positive".into()));
        }
        if self.data.n_bound < MIN_SAMPLES {
            return Err(LabError::Config(format!("n_bound must be at least {}", MIN_SAMPLES)));
        }
        if self.data.eval_interval == 0 {
            return Err(LabError::Config("eval_interval must be positive".into()));
        }
        let b = &self.bound_params;
        if b.vc_dim == 0 || !(b.delta > 0.0 && b.delta < 1.0) || !(0.0..=1.0).contains(&b.gamma) {
            return Err(LabError::Config(format!("invalid bound parameters {:?}", b)));
        }
        self.train_config(self.seeds[0]).validate()?;
        Ok(())
    }

    /// Training settings of the run with seed `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let [erm, consistency, dpd] = self.loss_weights;
        TrainConfig {
            variant: self.experiment,
            steps: self.steps,
            batch: self.batch,
            crop: self.data.crop,
            warmup_steps: self.data.warmup_steps,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            mu: self.mu,
            locator: LocatorConfig {
                tau: self.tau,
                ..LocatorConfig::default()
            },
            weights: LossWeights { erm, consistency, dpd },
            seed,
        }
    }

    /// Target domains to evaluate: the configured preset first, then the
    /// extra presets without repeats.
    pub fn target_presets(&self) -> Vec<ShiftPreset> {
        let mut out = vec![self.shift_preset];
        for p in &self.data.extra_presets {
            if !out.contains(p) {
                out.push(*p);
            }
        }
        out
    }

    /// Hex SHA-256 of the single-seed config with the output directory
    /// cleared. Identifies a run independently of where it is stored.
    pub fn run_hash(&self, seed: u64) -> Result<String> {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.experiment.name())
    }

    /// Directory of one seed's artifacts.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.label()).join(format!("seed_{}", seed))
    }
}

/// Derives an independent data seed for `lane` from a run seed.
pub fn data_seed(seed: u64, lane: u64) -> u64 {
    let mut z = seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Base configs of the batch-size sweep: batch sizes 2 to 32, with and
/// without the momentum twin, three seeds each.
pub fn batch_sweep(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for experiment in [Variant::BaselineErm, Variant::MomentumOnly] {
        for batch in [2, 4, 8, 16, 32] {
            let mut c = base.clone();
            c.experiment = experiment;
            c.batch = batch;
            c.seeds = vec![0, 1, 2];
            c.label = Some(format!("{}_batch{}", experiment.name(), batch));
            out.push(c);
        }
    }
    out
}
