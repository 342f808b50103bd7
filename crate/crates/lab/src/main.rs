use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpd_core::scene::sample_scenes;
use dpd_core::theory::{domain_features, estimate_lambda, proxy_a_distance, BoundInputs, BoundReport};
use dpd_core::train::PerturbationKind;
use dpd_lab::config::{batch_sweep, data_seed};
use dpd_lab::csvout::write_csv;
use dpd_lab::error::io_err;
use dpd_lab::harness::{run_experiment, run_perturbation_suite, write_bound_text, RunOptions};
use dpd_lab::record::load_records;
use dpd_lab::report::emit_report;
use dpd_lab::sceneio::{write_pgm, write_ppm, write_scene_set};
use dpd_lab::selftest::run_selftest;
use dpd_lab::{ExperimentConfig, LabError, Result};

#[derive(Parser)]
#[command(name = "dpd", version, about = "Dynamic proxy domain crowd localization lab")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shift preset: scale_up, density_up, style_dark, resolution_down or mixed.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    /// The configured experiment.
    Single,
    /// Every perturbation kind and noise level in place of the proxy branch.
    Perturbation,
    /// Batch sizes 2 to 32 with and without the momentum twin.
    BatchSweep,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target scene sets with image previews.
    Generate {
        /// Scenes per domain.
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Train and evaluate, then write the report tables.
    Train {
        #[arg(long, value_enum, default_value_t = Suite::Single)]
        suite: Suite,
        /// Continue from existing checkpoints of the same configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Bound report from image statistics, without training.
    Bounds {
        /// Measured source risk to plug into the bounds.
        #[arg(long, default_value_t = 0.0)]
        source_risk: f64,
        /// Measured proxy risk to plug into the bounds.
        #[arg(long, default_value_t = 0.0)]
        proxy_risk: f64,
    },
    /// Rebuild the report tables from the run records under the output directory.
    Report,
    /// Gradient checks, bound identities and ground-truth self-scoring.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(p) = &cli.preset {
        cfg.shift_preset = p.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(cfg: &ExperimentConfig, count: usize) -> Result<()> {
    let dir = &cfg.output_dir;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let (source, target) = cfg.shift_preset.specs();
    let seed = cfg.seeds[0];
    for (name, spec, lane) in [("source", &source, 101), ("target", &target, 102)] {
        let scenes = sample_scenes(spec, data_seed(seed, lane), count)?;
        let path = dir.join(format!("{}.dpdscn", name));
        write_scene_set(&path, &scenes)?;
        for (i, s) in scenes.iter().enumerate() {
            write_ppm(&images.join(format!("{}_{:03}.ppm", name, i)), &s.image)?;
            write_pgm(&images.join(format!("{}_{:03}_gt.pgm", name, i)), &s.gt_binary)?;
        }
        println!("{}: {} scenes -> {}", name, scenes.len(), path.display());
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, suite: Suite, resume: bool) -> Result<()> {
    let opts = RunOptions { resume };
    let records = match suite {
        Suite::Single => run_experiment(cfg, opts)?,
        Suite::Perturbation => run_perturbation_suite(cfg, &PerturbationKind::ALL, opts)?,
        Suite::BatchSweep => {
            let mut all = Vec::new();
            for c in batch_sweep(cfg) {
                all.extend(run_experiment(&c, opts)?);
            }
            all
        }
    };
    emit_report(&records, &cfg.output_dir)?;
    print!("{}", dpd_lab::report::summary_text(&records));
    Ok(())
}

fn bounds(cfg: &ExperimentConfig, source_risk: f64, proxy_risk: f64) -> Result<()> {
    let preset = cfg.shift_preset;
    let (source, target) = preset.specs();
    let mid = preset.midpoint();
    let seed = cfg.seeds[0];
    let n = cfg.data.n_bound;
    let fs = domain_features(&source, data_seed(seed, 201), n)?;
    let fp = domain_features(&mid, data_seed(seed, 202), n)?;
    let ft = domain_features(&target, data_seed(seed, 203), n)?;
    let div_st = proxy_a_distance(&fs, &ft, data_seed(seed, 204))?.value;
    let div_pt = proxy_a_distance(&fp, &ft, data_seed(seed, 205))?.value;
    // an untrained joint model: a valid but loose joint-risk estimate
    let budget = dpd_core::train::TrainConfig {
        steps: 0,
        ..cfg.train_config(seed)
    };
    let lambda = estimate_lambda(&source, &target, &budget, 50, data_seed(seed, 206))?;
    let report = BoundReport::compute(&BoundInputs {
        source_risk,
        proxy_risk,
        div_st,
        div_pt,
        gamma: cfg.bound_params.gamma,
        m_s: cfg.data.n_train as u64,
        m_p: (cfg.steps.saturating_sub(cfg.data.warmup_steps) * cfg.batch) as u64,
        vc_dim: cfg.bound_params.vc_dim,
        delta: cfg.bound_params.delta,
        lambda_hat: lambda,
        lambda_gamma: lambda,
    })?;
    println!("preset = {}", preset.name());
    for (k, v) in report.fields() {
        println!("{} = {}", k, v);
    }
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_bound_text(&dir.join(format!("bounds_{}.txt", preset.name())), &report)?;
    let fields = report.fields();
    let mut header = vec!["preset".to_string()];
    header.extend(fields.iter().map(|(k, _)| k.to_string()));
    let mut row = vec![preset.name().to_string()];
    row.extend(fields.into_iter().map(|(_, v)| v));
    write_csv(&dir.join(format!("bounds_{}.csv", preset.name())), "bound_report", &header, &[row])
}

fn report(dir: &Path) -> Result<()> {
    let records = load_records(dir)?;
    let written = emit_report(&records, dir)?;
    print!("{}", dpd_lab::report::summary_text(&records));
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn selftest(seed: Option<u64>) -> Result<bool> {
    let checks = run_selftest(&[seed.unwrap_or(0)])?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} passed, {} failed", checks.len() - failed.len(), failed.len());
    Ok(failed.is_empty())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Selftest => selftest(cli.seed),
        Command::Report => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => load_config(cli)?.output_dir,
            };
            report(&dir).map(|_| true)
        }
        Command::Generate { count } => generate(&load_config(cli)?, *count).map(|_| true),
        Command::Train { suite, resume } => train(&load_config(cli)?, *suite, *resume).map(|_| true),
        Command::Bounds { source_risk, proxy_risk } => {
            for (name, v) in [("source_risk", source_risk), ("proxy_risk", proxy_risk)] {
                if !(0.0..=1.0).contains(v) {
                    return Err(LabError::Config(format!("{} {} outside [0,1]", name, v)));
                }
            }
            bounds(&load_config(cli)?, *source_risk, *proxy_risk).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
