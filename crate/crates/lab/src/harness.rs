//! Experiment orchestration: training, evaluation, bound reports and
//! per-run artifacts.

use std::path::Path;
use std::time::Instant;

use dpd_core::eval::{distribution_stats, evaluate, DomainEval};
use dpd_core::losses::LossBreakdown;
use dpd_core::scene::{sample_scenes, Scene, ShiftPreset};
use dpd_core::theory::{estimate_lambda, proxy_a_distance, BoundInputs, BoundReport};
use dpd_core::train::{PerturbationKind, TrainConfig, Trainer, Variant};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{data_seed, ExperimentConfig};
use crate::csvout::write_csv;
use crate::error::{io_err, LabError, Result};
use crate::record::{CurvePoint, DomainRecord, RunRecord, RECORD_FILE, SOURCE_DOMAIN};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const PROGRESS_FILE: &str = "progress.json";

/// Scenes drawn for the joint-risk estimate, per domain and split.
const LAMBDA_SCENES: usize = 50;

// data-seed lanes of one run
const LANE_TRAIN: u64 = 1;
const LANE_SOURCE_TEST: u64 = 2;
const LANE_BOUND_SOURCE: u64 = 3;
const LANE_BOUND_TARGET: u64 = 4;
const LANE_PAD_MAIN: u64 = 5;
const LANE_PAD_MOMENTUM: u64 = 6;
const LANE_LAMBDA: u64 = 7;
const LANE_TARGET_BASE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Continue from an existing checkpoint of the same configuration.
    pub resume: bool,
}

/// Training state persisted next to the checkpoint.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Progress {
    loss_log: Vec<LossBreakdown>,
    curve: Vec<CurvePoint>,
}

/// Test and training scenes of one run.
pub struct RunData {
    pub train: Vec<Scene>,
    pub source_test: Vec<Scene>,
    pub targets: Vec<(ShiftPreset, Vec<Scene>)>,
}

impl RunData {
    /// Training and source scenes depend only on the seed, so every preset
    /// shares them.
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (source, _) = cfg.shift_preset.specs();
        let train = sample_scenes(&source, data_seed(seed, LANE_TRAIN), cfg.data.n_train)?;
        let source_test = sample_scenes(&source, data_seed(seed, LANE_SOURCE_TEST), cfg.data.n_test)?;
        let targets = cfg
            .target_presets()
            .into_iter()
            .map(|p| Ok((p, target_scenes(p, seed, cfg.data.n_test)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            source_test,
            targets,
        })
    }
}

/// Target test scenes of `preset` for a run seed.
pub fn target_scenes(preset: ShiftPreset, seed: u64, n: usize) -> Result<Vec<Scene>> {
    let idx = ShiftPreset::ALL.iter().position(|p| *p == preset).expect("listed preset") as u64;
    Ok(sample_scenes(&preset.specs().1, data_seed(seed, LANE_TARGET_BASE + idx), n)?)
}

fn domain_record(name: &str, ev: &DomainEval) -> Result<DomainRecord> {
    let stats = |v: &[f64]| if v.is_empty() { Ok(None) } else { distribution_stats(v).map(Some) };
    Ok(DomainRecord {
        domain: name.to_string(),
        metrics: ev.metrics,
        mcu: ev.mcu,
        pixel_error: ev.pixel_error,
        confidence: stats(&ev.positive_confidences)?,
        threshold: stats(&ev.positive_thresholds)?,
    })
}

/// Fraction of pixels on which the main model and the proxy generator
/// disagree, averaged over `scenes`.
fn proxy_disagreement(trainer: &Trainer, scenes: &[Scene]) -> Result<f64> {
    let cfg = trainer.config.effective_locator();
    let p = &trainer.params;
    let mut total = 0.0;
    for s in scenes {
        let main = p.main.predict(&s.image, &cfg)?.binary_hard;
        let proxy = match trainer.config.variant {
            Variant::FullDpd { .. } => p.forward_dpd_threshold(&s.image, &cfg)?.binary_hard,
            _ => p.momentum.predict(&s.image, &cfg)?.binary_hard,
        };
        let differ = main.data().iter().zip(proxy.data()).filter(|(a, b)| a != b).count();
        total += differ as f64 / main.len() as f64;
    }
    Ok(total / scenes.len().max(1) as f64)
}

fn embeddings(model: &dpd_core::locator::Locator, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
    Ok(scenes.iter().map(|s| model.embed(&s.image)).collect::<dpd_core::Result<Vec<_>>>()?)
}

/// Bound report of a trained model against the configured target preset.
///
/// The source divergence is measured on main-encoder embeddings and the
/// proxy divergence on momentum-encoder embeddings. Variants without a
/// proxy branch report `gamma = 1` and no proxy samples.
pub fn bound_report(cfg: &ExperimentConfig, trainer: &Trainer, seed: u64, source_risk: f64, source_test: &[Scene]) -> Result<BoundReport> {
    let (source, target) = cfg.shift_preset.specs();
    let n = cfg.data.n_bound;
    let bs = sample_scenes(&source, data_seed(seed, LANE_BOUND_SOURCE), n)?;
    let bt = sample_scenes(&target, data_seed(seed, LANE_BOUND_TARGET), n)?;
    let p = &trainer.params;
    let div_st = proxy_a_distance(&embeddings(&p.main, &bs)?, &embeddings(&p.main, &bt)?, data_seed(seed, LANE_PAD_MAIN))?.value;
    let div_pt =
        proxy_a_distance(&embeddings(&p.momentum, &bs)?, &embeddings(&p.momentum, &bt)?, data_seed(seed, LANE_PAD_MOMENTUM))?
            .value;
    let has_proxy = cfg.experiment.has_proxy_branch();
    let proxy_risk = if has_proxy { proxy_disagreement(trainer, source_test)? } else { 0.0 };
    let budget = TrainConfig {
        steps: cfg.data.lambda_steps,
        ..trainer.config
    };
    let lambda = estimate_lambda(&source, &target, &budget, LAMBDA_SCENES, data_seed(seed, LANE_LAMBDA))?;
    let proxy_samples = cfg.steps.saturating_sub(cfg.data.warmup_steps) * cfg.batch;
    let inputs = BoundInputs {
        source_risk,
        proxy_risk,
        div_st,
        div_pt,
        gamma: if has_proxy { cfg.bound_params.gamma } else { 1.0 },
        m_s: cfg.data.n_train as u64,
        m_p: if has_proxy { proxy_samples as u64 } else { 0 },
        vc_dim: cfg.bound_params.vc_dim,
        delta: cfg.bound_params.delta,
        lambda_hat: lambda,
        lambda_gamma: lambda,
    };
    Ok(BoundReport::compute(&inputs)?)
}

/// Writes a bound report as `key = value` lines.
pub fn write_bound_text(path: &Path, report: &BoundReport) -> Result<()> {
    let text: String = report.fields().iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect();
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_bound_csv(path: &Path, label: &str, seed: u64, report: &BoundReport) -> Result<()> {
    let fields = report.fields();
    let mut header = vec!["experiment".to_string(), "seed".to_string()];
    header.extend(fields.iter().map(|(k, _)| k.to_string()));
    let mut row = vec![label.to_string(), seed.to_string()];
    row.extend(fields.into_iter().map(|(_, v)| v));
    write_csv(path, "bound_report", &header, &[row])
}

fn write_training_log(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut row = vec![(i + 1).to_string()];
            row.extend([l.erm_l2, l.erm_l1, l.consistency, l.dpd_dice, l.dpd_l1, l.total].iter().map(|v| v.to_string()));
            row
        })
        .collect();
    write_csv(
        path,
        "training_log",
        &["step", "erm_l2", "erm_l1", "consistency", "dpd_dice", "dpd_l1", "total"],
        &rows,
    )
}

fn write_per_scene(path: &Path, ev: &DomainEval) -> Result<()> {
    let rows: Vec<Vec<String>> = ev
        .per_scene
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let m = dpd_core::eval::LocalizationMetrics::from_counts(s.tp, s.fp, s.fn_);
            vec![
                i.to_string(),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
            ]
        })
        .collect();
    write_csv(path, "per_scene", &["scene_id", "tp", "fp", "fn", "precision", "recall", "f1"], &rows)
}

fn write_distributions(path: &Path, label: &str, domains: &[DomainRecord]) -> Result<()> {
    let mut rows = Vec::new();
    for d in domains {
        for (quantity, stats) in [("confidence", &d.confidence), ("threshold", &d.threshold)] {
            if let Some(s) = stats {
                rows.push(vec![
                    label.to_string(),
                    d.domain.clone(),
                    quantity.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.mean.to_string(),
                    s.min.to_string(),
                    s.max.to_string(),
                    s.n.to_string(),
                ]);
            }
        }
    }
    write_csv(
        path,
        "distribution_stats",
        &["experiment", "domain", "quantity", "q1", "median", "q3", "mean", "min", "max", "n"],
        &rows,
    )
}

fn save_progress(dir: &Path, trainer: &Trainer, hash: &str, progress: &Progress) -> Result<()> {
    Checkpoint::capture(trainer, hash).save(&dir.join(CHECKPOINT_FILE))?;
    let path = dir.join(PROGRESS_FILE);
    let text = serde_json::to_string(progress).map_err(|e| LabError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

fn load_progress(dir: &Path, trainer: &mut Trainer, hash: &str) -> Result<Progress> {
    let ck = Checkpoint::load_for_resume(&dir.join(CHECKPOINT_FILE), hash)?;
    ck.restore_into(trainer)?;
    let path = dir.join(PROGRESS_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let progress: Progress = serde_json::from_str(&text).map_err(|e| LabError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if progress.loss_log.len() != trainer.step {
        return Err(LabError::Format {
            path,
            detail: format!("{} logged steps but checkpoint is at step {}", progress.loss_log.len(), trainer.step),
        });
    }
    Ok(progress)
}

/// Trains, evaluates and reports one seed of `cfg`, writing every artifact
/// into [`ExperimentConfig::run_dir`].
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.run_hash(seed)?;
    let dir = cfg.run_dir(seed);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut single = cfg.clone();
    single.seeds = vec![seed];
    single.save(&dir.join("config.toml"))?;

    let data = RunData::generate(cfg, seed)?;
    let mut trainer = Trainer::new(cfg.train_config(seed))?;
    let mut progress = if opts.resume && dir.join(CHECKPOINT_FILE).exists() {
        let p = load_progress(&dir, &mut trainer, &hash)?;
        log::info!("{}: resuming seed {} at step {}", cfg.label(), seed, trainer.step);
        p
    } else {
        Progress::default()
    };

    let loc_cfg = trainer.config.effective_locator();
    let min_area = cfg.data.min_area;
    let primary = &data.targets[0].1;
    while trainer.step < cfg.steps {
        let losses = trainer.train_step(&data.train)?;
        progress.loss_log.push(losses);
        if trainer.step % cfg.data.eval_interval == 0 {
            let ev = evaluate(&trainer.params.main, &loc_cfg, primary, min_area)?;
            progress.curve.push(CurvePoint {
                step: trainer.step,
                target_f1: ev.metrics.f1,
            });
            log::debug!("{} seed {} step {}: target f1 {:.4}", cfg.label(), seed, trainer.step, ev.metrics.f1);
            save_progress(&dir, &trainer, &hash, &progress)?;
        }
    }
    save_progress(&dir, &trainer, &hash, &progress)?;

    let label = cfg.label();
    let source_eval = evaluate(&trainer.params.main, &loc_cfg, &data.source_test, min_area)?;
    write_per_scene(&dir.join(format!("per_scene_{}.csv", SOURCE_DOMAIN)), &source_eval)?;
    let mut domains = vec![domain_record(SOURCE_DOMAIN, &source_eval)?];
    for (preset, scenes) in &data.targets {
        let ev = evaluate(&trainer.params.main, &loc_cfg, scenes, min_area)?;
        write_per_scene(&dir.join(format!("per_scene_{}.csv", preset.name())), &ev)?;
        domains.push(domain_record(preset.name(), &ev)?);
    }
    write_distributions(&dir.join("distributions.csv"), &label, &domains)?;
    write_training_log(&dir.join("training_log.csv"), &progress.loss_log)?;

    let bound = bound_report(cfg, &trainer, seed, source_eval.pixel_error, &data.source_test)?;
    write_bound_text(&dir.join("bound_report.txt"), &bound)?;
    write_bound_csv(&dir.join("bound_report.csv"), &label, seed, &bound)?;

    let record = RunRecord {
        config_hash: hash,
        label,
        experiment: cfg.experiment,
        preset: cfg.shift_preset,
        seed,
        steps: cfg.steps,
        batch: cfg.batch,
        eval_interval: cfg.data.eval_interval,
        loss_log: progress.loss_log,
        curve: progress.curve,
        checkpoint: dir.join(CHECKPOINT_FILE),
        domains,
        bound,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    record.save(&dir.join(RECORD_FILE))?;
    log::info!(
        "{} seed {}: target f1 {:.4}, source f1 {:.4} ({:.1}s)",
        record.label,
        seed,
        record.target().metrics.f1,
        record.domains[0].metrics.f1,
        record.wall_clock_seconds
    );
    Ok(record)
}

/// One record per configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| run_seed(cfg, s, opts)).collect()
}

/// Configs replacing the proxy branch by each noise level of `kind`; all
/// other settings come from `base`.
pub fn perturbation_configs(base: &ExperimentConfig, kind: PerturbationKind) -> Vec<ExperimentConfig> {
    kind.sigmas()
        .iter()
        .map(|&sigma| {
            let mut c = base.clone();
            c.experiment = Variant::Perturbation { perturbation: kind, sigma };
            c.label = None;
            c
        })
        .collect()
}

/// Runs every noise level of each kind in `kinds`.
pub fn run_perturbation_suite(base: &ExperimentConfig, kinds: &[PerturbationKind], opts: RunOptions) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for cfg in perturbation_configs(base, kind) {
            out.extend(run_experiment(&cfg, opts)?);
        }
    }
    Ok(out)
}

/// Hard binary maps of ground truth as predictions: scores a scene against
/// itself.
pub fn gt_self_score(scene: &Scene, min_area: usize) -> Result<dpd_core::eval::SceneScore> {
    Ok(dpd_core::eval::score_binary(&scene.gt_binary, scene, min_area)?)
}

