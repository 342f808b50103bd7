//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::ParamSet;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

fn with_coord<M: ParamSet + ?Sized>(model: &mut M, flat: usize, f: impl FnOnce(&mut f64)) {
    let mut offset = 0;
    let mut f = Some(f);
    model.visit_mut(&mut |p| {
        let n = p.numel();
        if flat >= offset && flat < offset + n {
            if let Some(f) = f.take() {
                f(&mut p.value.data_mut()[flat - offset]);
            }
        }
        offset += n;
    });
}

fn flat_grads<M: ParamSet + ?Sized>(model: &M) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit(&mut |p| out.extend_from_slice(p.grad.data()));
    out
}

/// Compares analytic gradients against central differences.
///
/// `loss` must evaluate the scalar objective for the current parameter values
/// and accumulate its analytic gradient into the parameters' `grad` fields;
/// gradients are zeroed before every call. Up to `coordinates` flat parameter
/// indices are sampled without replacement using `seed`. The per-coordinate
/// error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<M, F>(model: &mut M, eps: f64, coordinates: usize, seed: u64, mut loss: F) -> Result<GradCheckReport>
where
    M: ParamSet + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-7, 1e-4]", eps)));
    }
    let mut eval = |model: &mut M| -> Result<f64> {
        model.zero_grad();
        let v = loss(model)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss = {}", v)));
        }
        Ok(v)
    };

    eval(model)?;
    let analytic = flat_grads(model);
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grad_check analytic gradient".into()));
    }
    let total = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coordinates >= total {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, coordinates).into_vec()
    };

    let mut worst: f64 = 0.0;
    for &flat in &picks {
        let mut original = 0.0;
        with_coord(model, flat, |v| {
            original = *v;
            *v = original + eps;
        });
        let plus = eval(model)?;
        with_coord(model, flat, |v| *v = original - eps);
        let minus = eval(model)?;
        with_coord(model, flat, |v| *v = original);
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[flat];
        let denom = 1.0_f64.max(math::abs(a)).max(math::abs(numeric));
        worst = worst.max(math::abs(a - numeric) / denom);
    }
    // leave the analytic gradients in place for the caller
    eval(model)?;
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates_checked: picks.len(),
    })
}
