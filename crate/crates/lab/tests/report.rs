mod common;

use std::path::Path;

use common::tiny_config;
use dpd_core::train::Variant;
use dpd_lab::csvout::read_csv;
use dpd_lab::harness::{run_experiment, run_seed, RunOptions};
use dpd_lab::record::{load_records, RunRecord};
use dpd_lab::report::{emit_report, format_pm, mean_std, ABLATION_CSV, BOUND_CSV, BOXPLOT_CSV, CURVE_CSV, MCU_CSV, METRICS_CSV, SUMMARY_TXT};
use dpd_lab::LabError;

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read_csv(path).unwrap().2
}

#[test]
fn single_record_gives_one_row_per_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::FullDpd { strong_loss: true }, dir.path());
    let records = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(records.len(), 1);
    let out = dir.path().join("report");
    let written = emit_report(&records, &out).unwrap();
    assert_eq!(written.len(), 7);
    for name in [METRICS_CSV, ABLATION_CSV, MCU_CSV, BOXPLOT_CSV, BOUND_CSV] {
        let (_, header, rows) = read_csv(&out.join(name)).unwrap();
        assert_eq!(rows.len(), 1, "{}", name);
        assert_eq!(rows[0].len(), header.len(), "{}", name);
    }
    // one curve row per evaluation
    assert_eq!(csv_rows(&out.join(CURVE_CSV)).len(), cfg.steps / cfg.data.eval_interval);
    assert!(std::fs::read_to_string(out.join(SUMMARY_TXT)).unwrap().contains("full_dpd"));
}

#[test]
fn run_directory_holds_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::MomentumOnly, dir.path());
    let r = run_seed(&cfg, 5, RunOptions::default()).unwrap();
    let run = cfg.run_dir(5);
    assert!(run.starts_with(dir.path()));
    for f in [
        "config.toml",
        "checkpoint.bin",
        "record.json",
        "training_log.csv",
        "per_scene_source.csv",
        "per_scene_mixed.csv",
        "distributions.csv",
        "bound_report.txt",
        "bound_report.csv",
    ] {
        assert!(run.join(f).is_file(), "{}", f);
    }
    let (schema, header, rows) = read_csv(&run.join("training_log.csv")).unwrap();
    assert_eq!(schema, "training_log");
    assert_eq!(header, ["step", "erm_l2", "erm_l1", "consistency", "dpd_dice", "dpd_l1", "total"]);
    assert_eq!(rows.len(), cfg.steps);
    let (_, header, rows) = read_csv(&run.join("per_scene_mixed.csv")).unwrap();
    assert_eq!(header, ["scene_id", "tp", "fp", "fn", "precision", "recall", "f1"]);
    assert_eq!(rows.len(), cfg.data.n_test);
    let tp: usize = rows.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(tp, r.target().metrics.tp);
    let (_, header, _) = read_csv(&run.join("distributions.csv")).unwrap();
    assert_eq!(&header[..3], ["experiment", "domain", "quantity"]);
    let text = std::fs::read_to_string(run.join("bound_report.txt")).unwrap();
    assert!(text.contains("lambda_hat_estimate = "));
    // momentum-only has no proxy branch, so the bound degenerates to the source bound
    assert_eq!(r.bound.gamma, 1.0);
    assert_eq!(r.bound.m_p, 0);
    assert_eq!(r.bound.erm_rhs, r.bound.dpd_rhs);

    let loaded = RunRecord::load(&run.join("record.json")).unwrap();
    assert_eq!(loaded, r);
    assert_eq!(load_records(dir.path()).unwrap(), vec![r]);
}

#[test]
fn identical_config_and_seed_reproduce() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_seed(&tiny_config(Variant::FullDpd { strong_loss: true }, a.path()), 5, RunOptions::default()).unwrap();
    let rb = run_seed(&tiny_config(Variant::FullDpd { strong_loss: true }, b.path()), 5, RunOptions::default()).unwrap();
    assert_eq!(ra.config_hash, rb.config_hash);
    assert_eq!(ra.loss_log, rb.loss_log);
    assert_eq!(ra.domains, rb.domains);
    assert_eq!(ra.bound, rb.bound);
    assert_eq!(ra.curve, rb.curve);
    let rel = |p: &Path, root: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    for f in ["training_log.csv", "per_scene_source.csv", "distributions.csv", "bound_report.csv"] {
        let pa = ra.checkpoint.with_file_name(f);
        let pb = rb.checkpoint.with_file_name(f);
        assert_eq!(rel(&pa, a.path()), rel(&pb, b.path()));
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{}", f);
    }
}

#[test]
fn resume_continues_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let mut short = tiny_config(Variant::FullDpd { strong_loss: true }, dir.path());
    short.steps = 20;
    // a 20-step run leaves a checkpoint that a 40-step run may not adopt
    run_seed(&short, 5, RunOptions::default()).unwrap();
    let full = tiny_config(Variant::FullDpd { strong_loss: true }, dir.path());
    let err = run_seed(&full, 5, RunOptions { resume: true }).unwrap_err();
    assert!(matches!(err, LabError::HashMismatch { .. }));
    assert_eq!(err.exit_code(), 2);

    let reference = {
        let other = tempfile::tempdir().unwrap();
        run_seed(&tiny_config(Variant::FullDpd { strong_loss: true }, other.path()), 5, RunOptions::default()).unwrap()
    };
    // resuming a finished run of the same config re-evaluates identically
    let first = run_seed(&full, 5, RunOptions::default()).unwrap();
    let again = run_seed(&full, 5, RunOptions { resume: true }).unwrap();
    assert_eq!(first.domains, reference.domains);
    assert_eq!(again.domains, reference.domains);
    assert_eq!(again.loss_log, reference.loss_log);
}

#[test]
fn mean_and_spread_match_hand_computation() {
    let (m, s) = mean_std(&[0.70, 0.74, 0.78]);
    assert!((m - 0.74).abs() < 1e-12);
    assert!((s - 0.04).abs() < 1e-12);
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    assert_eq!(format_pm(0.734, 0.0055), "73.4 ±0.55");
}

#[test]
fn aggregates_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Variant::BaselineErm, dir.path());
    cfg.seeds = vec![1, 2, 3];
    let records = run_experiment(&cfg, RunOptions::default()).unwrap();
    let out = dir.path().join("report");
    emit_report(&records, &out).unwrap();
    let (_, header, rows) = read_csv(&out.join(METRICS_CSV)).unwrap();
    assert_eq!(rows.len(), 1);
    let col = header.iter().position(|h| h == "mixed_f1").unwrap();
    let f1s: Vec<f64> = records.iter().map(|r| r.target().metrics.f1).collect();
    let mean = f1s.iter().sum::<f64>() / 3.0;
    let got: f64 = rows[0][col].parse().unwrap();
    assert!((got - mean).abs() < 1e-12);
    let std_col = header.iter().position(|h| h == "mixed_f1_std").unwrap();
    let var = f1s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 2.0;
    let got: f64 = rows[0][std_col].parse().unwrap();
    assert!((got - var.sqrt()).abs() < 1e-12);
    assert_eq!(csv_rows(&out.join(BOUND_CSV)).len(), 3);
    assert!(matches!(emit_report(&[], &out), Err(LabError::Config(_))));
}
