//! Aggregate tables over many run records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dpd_core::eval::DistributionStats;
use dpd_core::scene::ShiftPreset;

use crate::csvout::write_csv;
use crate::error::{io_err, LabError, Result};
use crate::record::{RunRecord, SOURCE_DOMAIN};

pub const METRICS_CSV: &str = "metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const MCU_CSV: &str = "mcu.csv";
pub const BOXPLOT_CSV: &str = "boxplot.csv";
pub const CURVE_CSV: &str = "training_curve.csv";
pub const BOUND_CSV: &str = "bound_report.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Mean and sample standard deviation (`n - 1` denominator, 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A `[0, 1]` score as percent with its spread, e.g. `73.4 ±0.55`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.1} ±{:.2}", 100.0 * mean, 100.0 * std)
}

/// Records sharing a label and preset, in order of first appearance.
struct Group<'a> {
    label: String,
    preset: ShiftPreset,
    records: Vec<&'a RunRecord>,
}

fn group_by<'a>(records: &'a [RunRecord], key: impl Fn(&RunRecord) -> String) -> Vec<Group<'a>> {
    let mut groups: Vec<Group<'a>> = Vec::new();
    for r in records {
        let label = key(r);
        match groups.iter_mut().find(|g| g.label == label && g.preset == r.preset) {
            Some(g) => g.records.push(r),
            None => groups.push(Group {
                label,
                preset: r.preset,
                records: vec![r],
            }),
        }
    }
    groups
}

fn series_name(g: &Group<'_>, mixed_presets: bool) -> String {
    if mixed_presets {
        format!("{}@{}", g.label, g.preset.name())
    } else {
        g.label.clone()
    }
}

/// Domains present in any record: source first, then presets in canonical
/// order.
fn domains_of(records: &[RunRecord]) -> Vec<String> {
    let mut out = vec![SOURCE_DOMAIN.to_string()];
    for p in ShiftPreset::ALL {
        if records.iter().any(|r| r.domain(p.name()).is_some()) {
            out.push(p.name().to_string());
        }
    }
    out
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn domain_values(g: &Group<'_>, domain: &str, f: impl Fn(&crate::record::DomainRecord) -> f64) -> Vec<f64> {
    g.records.iter().filter_map(|r| r.domain(domain)).map(f).collect()
}

/// Per-seed target F1 with noise levels of one kind averaged first.
fn seed_averaged(g: &Group<'_>, f: impl Fn(&RunRecord) -> f64) -> Vec<f64> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &g.records {
        by_seed.entry(r.seed).or_default().push(f(r));
    }
    by_seed.values().map(|v| mean_std(v).0).collect()
}

fn stats_mean(list: &[&DistributionStats]) -> [f64; 7] {
    let m = |f: fn(&DistributionStats) -> f64| mean_std(&list.iter().map(|s| f(s)).collect::<Vec<_>>()).0;
    [
        m(|s| s.q1),
        m(|s| s.median),
        m(|s| s.q3),
        m(|s| s.mean),
        m(|s| s.min),
        m(|s| s.max),
        m(|s| s.n as f64),
    ]
}

/// Writes the six aggregate CSV tables and a text summary into `out_dir`;
/// returns the written paths.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(LabError::Config("no run records to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mixed = records.iter().any(|r| r.preset != records[0].preset);
    let groups = group_by(records, |r| r.label.clone());
    let domains = domains_of(records);
    let mut written = Vec::new();

    // metrics: one row per experiment, F1/precision/recall per domain
    let mut header = vec!["experiment".to_string(), "preset".to_string(), "n_seeds".to_string()];
    for d in &domains {
        for q in ["f1", "f1_std", "precision", "recall"] {
            header.push(format!("{}_{}", d, q));
        }
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let mut row = vec![g.label.clone(), g.preset.name().to_string(), g.records.len().to_string()];
            for d in &domains {
                let (f1, f1_std) = mean_std(&domain_values(g, d, |x| x.metrics.f1));
                row.push(cell(f1));
                row.push(cell(f1_std));
                row.push(cell(mean_std(&domain_values(g, d, |x| x.metrics.precision)).0));
                row.push(cell(mean_std(&domain_values(g, d, |x| x.metrics.recall)).0));
            }
            row
        })
        .collect();
    let path = out_dir.join(METRICS_CSV);
    write_csv(&path, "metrics", &header, &rows)?;
    written.push(path);

    // ablation: perturbation noise levels pooled per kind, averaged per seed
    let ablation_groups = group_by(records, |r| r.experiment.group_name());
    let rows: Vec<Vec<String>> = ablation_groups
        .iter()
        .map(|g| {
            let (f1, f1_std) = mean_std(&seed_averaged(g, |r| r.target().metrics.f1));
            let (p, _) = mean_std(&seed_averaged(g, |r| r.target().metrics.precision));
            let (rc, _) = mean_std(&seed_averaged(g, |r| r.target().metrics.recall));
            let n_seeds = seed_averaged(g, |_| 0.0).len();
            vec![
                g.label.clone(),
                g.preset.name().to_string(),
                n_seeds.to_string(),
                g.records.len().to_string(),
                cell(f1),
                cell(f1_std),
                cell(p),
                cell(rc),
            ]
        })
        .collect();
    let path = out_dir.join(ABLATION_CSV);
    write_csv(
        &path,
        "ablation",
        &["experiment", "preset", "n_seeds", "n_runs", "f1_mean", "f1_std", "precision_mean", "recall_mean"],
        &rows,
    )?;
    written.push(path);

    // MCU per domain
    let mut header = vec!["experiment".to_string(), "preset".to_string(), "n_seeds".to_string()];
    for d in &domains {
        header.push(format!("{}_mcu", d));
        header.push(format!("{}_mcu_std", d));
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let mut row = vec![g.label.clone(), g.preset.name().to_string(), g.records.len().to_string()];
            for d in &domains {
                let (m, s) = mean_std(&domain_values(g, d, |x| x.mcu));
                row.push(cell(m));
                row.push(cell(s));
            }
            row
        })
        .collect();
    let path = out_dir.join(MCU_CSV);
    write_csv(&path, "mcu", &header, &rows)?;
    written.push(path);

    // boxplot statistics on the target domain, each statistic averaged over seeds
    let mut header = vec!["experiment".to_string(), "domain".to_string(), "n_seeds".to_string()];
    for q in ["confidence", "threshold"] {
        for s in ["q1", "median", "q3", "mean", "min", "max", "n"] {
            header.push(format!("{}_{}", q, s));
        }
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let mut row = vec![g.label.clone(), g.preset.name().to_string(), g.records.len().to_string()];
            for pick in [
                (|d: &crate::record::DomainRecord| d.confidence) as fn(&crate::record::DomainRecord) -> Option<DistributionStats>,
                |d| d.threshold,
            ] {
                let stats: Vec<DistributionStats> = g.records.iter().filter_map(|r| pick(r.target())).collect();
                let refs: Vec<&DistributionStats> = stats.iter().collect();
                row.extend(stats_mean(&refs).iter().map(|v| cell(*v)));
            }
            row
        })
        .collect();
    let path = out_dir.join(BOXPLOT_CSV);
    write_csv(&path, "boxplot", &header, &rows)?;
    written.push(path);

    // training curve: one row per evaluation step, one column per experiment
    let mut steps: Vec<usize> = records.iter().flat_map(|r| r.curve.iter().map(|c| c.step)).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut header = vec!["step".to_string()];
    header.extend(groups.iter().map(|g| format!("{}_target_f1", series_name(g, mixed))));
    let rows: Vec<Vec<String>> = steps
        .iter()
        .map(|&step| {
            let mut row = vec![step.to_string()];
            for g in &groups {
                let vals: Vec<f64> = g
                    .records
                    .iter()
                    .filter_map(|r| r.curve.iter().find(|c| c.step == step))
                    .map(|c| c.target_f1)
                    .collect();
                row.push(cell(mean_std(&vals).0));
            }
            row
        })
        .collect();
    let path = out_dir.join(CURVE_CSV);
    write_csv(&path, "training_curve", &header, &rows)?;
    written.push(path);

    // bound report: one row per run
    let fields = records[0].bound.fields();
    let mut header = vec!["experiment".to_string(), "preset".to_string(), "seed".to_string()];
    header.extend(fields.iter().map(|(k, _)| k.to_string()));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone(), r.preset.name().to_string(), r.seed.to_string()];
            row.extend(r.bound.fields().into_iter().map(|(_, v)| v));
            row
        })
        .collect();
    let path = out_dir.join(BOUND_CSV);
    write_csv(&path, "bound_report", &header, &rows)?;
    written.push(path);

    let path = out_dir.join(SUMMARY_TXT);
    std::fs::write(&path, summary_text(records)).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

/// Plain-text table of target F1, precision, recall and MCU as mean ±std
/// over seeds.
pub fn summary_text(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:<16} {:>6} {:>14} {:>14} {:>14} {:>14}\n",
        "experiment", "target", "seeds", "F1", "precision", "recall", "MCU"
    ));
    for g in group_by(records, |r| r.label.clone()) {
        let t = |f: fn(&crate::record::DomainRecord) -> f64| {
            let v: Vec<f64> = g.records.iter().map(|r| f(r.target())).collect();
            let (m, s) = mean_std(&v);
            format_pm(m, s)
        };
        let (mcu, mcu_std) = mean_std(&g.records.iter().map(|r| r.target().mcu).collect::<Vec<_>>());
        out.push_str(&format!(
            "{:<28} {:<16} {:>6} {:>14} {:>14} {:>14} {:>14}\n",
            g.label,
            g.preset.name(),
            g.records.len(),
            t(|d| d.metrics.f1),
            t(|d| d.metrics.precision),
            t(|d| d.metrics.recall),
            format!("{:.4} ±{:.4}", mcu, mcu_std),
        ));
    }
    out
}
