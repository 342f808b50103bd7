#![allow(dead_code)]

use std::path::Path;

use dpd_core::train::Variant;
use dpd_lab::ExperimentConfig;

/// A configuration that trains in well under a second.
pub fn tiny_config(experiment: Variant, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        experiment,
        seeds: vec![5],
        steps: 40,
        batch: 2,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.data.n_train = 10;
    c.data.n_test = 8;
    c.data.warmup_steps = 20;
    c.data.eval_interval = 10;
    c.data.lambda_steps = 5;
    c
}
