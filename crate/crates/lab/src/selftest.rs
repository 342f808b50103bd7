//! Quick invariant suite behind `dpd selftest`.

use dpd_core::checks::gradient_suite;
use dpd_core::scene::{sample_scenes, source_spec};
use dpd_core::theory::{dpd_bound_rhs, erm_bound_rhs, monte_carlo_uncertainty, vc_complexity_term, BoundInputs};

use crate::error::Result;
use crate::harness::gt_self_score;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

/// Bound arithmetic identities on a small set of inputs.
pub fn bound_identities() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let base = BoundInputs {
        source_risk: 0.12,
        proxy_risk: 0.3,
        div_st: 0.8,
        div_pt: 0.4,
        gamma: 1.0,
        m_s: 1000,
        m_p: 0,
        vc_dim: 10,
        delta: 0.1,
        lambda_hat: 0.05,
        lambda_gamma: 0.05,
    };
    let erm = erm_bound_rhs(&base)?;
    let dpd = dpd_bound_rhs(&base)?;
    out.push(outcome(
        "proxy bound reduces to source bound",
        erm.to_bits() == dpd.to_bits(),
        format!("erm {} dpd {}", erm, dpd),
    ));
    let vc = vc_complexity_term(1000, 10, 0.1)?;
    let oracle = 4.0 * ((20.0 * 2000f64.ln() + 20f64.ln()) / 1000.0).sqrt();
    out.push(outcome("vc term value", (vc - oracle).abs() <= 1e-12, format!("{} vs {}", vc, oracle)));
    let grid: Vec<u64> = (0..50).map(|i| (100.0 * 1e4f64.powf(i as f64 / 49.0)).round() as u64).collect();
    let vals = grid.iter().map(|&m| vc_complexity_term(m, 10, 0.1)).collect::<dpd_core::Result<Vec<_>>>()?;
    let monotone = vals.windows(2).all(|w| w[1] < w[0]);
    out.push(outcome("vc term decreases in m", monotone, format!("{} grid points", grid.len())));
    let mcu = monte_carlo_uncertainty(&[(-1f64).exp()])?;
    out.push(outcome("mcu of 1/e", (mcu - 0.36788).abs() < 1e-5, format!("{}", mcu)));
    Ok(out)
}

/// Gradient checks for each seed, bound identities and ground-truth
/// self-scoring.
pub fn run_selftest(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for c in gradient_suite(seed)? {
            out.push(outcome(
                format!("gradient {} (seed {})", c.name, seed),
                c.passed(),
                format!("max relative error {:.3e}", c.report.max_relative_error),
            ));
        }
    }
    out.extend(bound_identities()?);
    let scenes = sample_scenes(&source_spec(), 7, 20)?;
    let mut perfect = 0;
    for s in &scenes {
        let sc = gt_self_score(s, dpd_core::eval::DEFAULT_MIN_AREA)?;
        if sc.fp == 0 && sc.fn_ == 0 {
            perfect += 1;
        }
    }
    out.push(outcome(
        "ground truth scores itself perfectly",
        perfect == scenes.len(),
        format!("{}/{} scenes", perfect, scenes.len()),
    ));
    Ok(out)
}
