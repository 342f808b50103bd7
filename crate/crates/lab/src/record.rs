use std::path::{Path, PathBuf};

use dpd_core::eval::{DistributionStats, LocalizationMetrics};
use dpd_core::losses::LossBreakdown;
use dpd_core::scene::ShiftPreset;
use dpd_core::theory::BoundReport;
use dpd_core::train::Variant;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

/// Name of the record file inside a run directory.
pub const RECORD_FILE: &str = "record.json";

/// Domain label of the source test split.
pub const SOURCE_DOMAIN: &str = "source";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub target_f1: f64,
}

/// Frozen-model measurements on one domain's test scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub domain: String,
    pub metrics: LocalizationMetrics,
    pub mcu: f64,
    pub pixel_error: f64,
    /// Confidences at ground-truth-positive pixels; absent when the domain
    /// has no positive pixel.
    pub confidence: Option<DistributionStats>,
    pub threshold: Option<DistributionStats>,
}

/// Outcome of training and evaluating one (config, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub label: String,
    pub experiment: Variant,
    pub preset: ShiftPreset,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub eval_interval: usize,
    pub loss_log: Vec<LossBreakdown>,
    /// Target F1 of the configured preset every `eval_interval` steps.
    pub curve: Vec<CurvePoint>,
    pub checkpoint: PathBuf,
    /// Source split first, then each evaluated target preset.
    pub domains: Vec<DomainRecord>,
    pub bound: BoundReport,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn domain(&self, name: &str) -> Option<&DomainRecord> {
        self.domains.iter().find(|d| d.domain == name)
    }

    /// Measurements on the configured target preset.
    pub fn target(&self) -> &DomainRecord {
        self.domain(self.preset.name()).expect("target domain is always evaluated")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| LabError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Every record file below `dir`, in path order.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| LabError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.file_name() == RECORD_FILE {
            paths.push(entry.into_path());
        }
    }
    paths.iter().map(|p| RunRecord::load(p)).collect()
}
