//! Finite-difference gradient suite over every layer and loss.
//!
//! Layer checks wrap the layer input (or parameters) in a [`Param`] and probe
//! `sum(w * layer(x))` for a fixed random `w`. Mean-reduced losses are scaled
//! by their element count so gradients are O(1) and the relative-error floor
//! of one does not hide mistakes.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::locator::{
    soft_binarization_backward, Decoder, Encoder, Locator, LocatorConfig, LocatorParams, OutputGrads, ThresholdNet,
};
use crate::losses::{consistency_loss, dpd_loss, erm_loss};
use crate::ops::{self, Conv2d};
use crate::scene::{sample_scenes, DomainSpec, Texture};
use crate::tensor::{Param, ParamSet, Tensor};

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_COORDINATES: usize = 100;
/// Largest acceptable relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// One named check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRAD_TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Objective `sum(w * f(x))` over an input wrapped as a parameter.
fn check_input_op(
    seed: u64,
    x: Tensor,
    w: Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
    back: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let mut p = Param::new("x", x);
    grad_check(&mut p, GRAD_EPS, GRAD_COORDINATES, seed, |p| {
        let y = f(&p.value)?;
        let g = back(&p.value, &w)?;
        p.grad.add_assign(&g)?;
        Ok(dot(&y, &w))
    })
}

/// A tiny scene spec for full-model checks.
pub fn tiny_spec() -> DomainSpec {
    DomainSpec {
        image_size: (16, 16),
        count_range: (1, 3),
        head_radius_range: (1.5, 2.5),
        brightness: 0.5,
        contrast: 1.0,
        noise_sigma: 0.02,
        background_texture: Texture::Gradient,
        seed_stream: 7,
    }
}

/// Runs every check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(NamedCheck { name, report });

    // convolutions: parameters and input, both strides
    for (name, stride) in [("conv2d_stride1", 1), ("conv2d_stride2", 2)] {
        let conv = Conv2d::new("c", 3, 4, 3, stride, &mut rng);
        let x = rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &conv.forward(&x)?.shape().to_vec(), -1.0, 1.0);
        let mut model = conv.clone();
        let xp = x.clone();
        push(
            name,
            grad_check(&mut model, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
                let y = m.forward(&xp)?;
                m.backward(&xp, &w)?;
                Ok(dot(&y, &w))
            })?,
        );
        let c2 = conv.clone();
        push(
            if stride == 1 { "conv2d_input_stride1" } else { "conv2d_input_stride2" },
            check_input_op(
                seed,
                x,
                w.clone(),
                |x| c2.forward(x),
                |x, g| ops::conv2d_backward(x, &c2.kernel.value, &c2.bias.value, c2.stride, c2.pad, g).map(|(dx, _, _)| dx),
            )?,
        );
    }

    // elementwise and resampling ops; relu inputs kept away from the kink
    let mut x = rand_tensor(&mut rng, &[2, 4, 4], 0.05, 1.0);
    x.data_mut().iter_mut().for_each(|v| {
        if rng.random::<bool>() {
            *v = -*v
        }
    });
    let w = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
    push("relu", check_input_op(seed, x.clone(), w.clone(), |x| Ok(ops::relu(x)), ops::relu_backward)?);
    push(
        "sigmoid",
        check_input_op(seed, x.clone(), w.clone(), |x| Ok(ops::sigmoid(x)), |x, g| {
            ops::sigmoid_backward(&ops::sigmoid(x), g)
        })?,
    );
    let wu = rand_tensor(&mut rng, &[2, 16, 16], -1.0, 1.0);
    push(
        "bilinear_upsample",
        check_input_op(seed, x.clone(), wu, |x| ops::bilinear_upsample(x, 4), |x, g| {
            ops::bilinear_upsample_backward(x.shape(), 4, g)
        })?,
    );
    let wp = rand_tensor(&mut rng, &[2, 1, 1], -1.0, 1.0);
    push(
        "avg_pool",
        check_input_op(seed, x.clone(), wp, |x| ops::avg_pool(x, 4), |x, g| ops::avg_pool_backward(x.shape(), 4, g))?,
    );
    let map = rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
    let (m1, m2) = (map.clone(), map.clone());
    push(
        "modulate_features",
        check_input_op(seed, x.clone(), w.clone(), move |x| ops::modulate(x, &m1), move |x, g| {
            ops::modulate_backward(x, &m2, g).map(|(d, _)| d)
        })?,
    );
    let (x1, x2) = (x.clone(), x.clone());
    push(
        "modulate_map",
        check_input_op(seed, map, w.clone(), move |m| ops::modulate(&x1, m), move |m, g| {
            ops::modulate_backward(&x2, m, g).map(|(_, d)| d)
        })?,
    );

    // soft binarization with respect to confidence and threshold
    let cfg = LocatorConfig::default();
    let thr = rand_tensor(&mut rng, &[1, 4, 4], 0.1, 0.9);
    let conf = rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
    let wb = rand_tensor(&mut rng, &[1, 4, 4], -1.0, 1.0);
    let tau = cfg.tau;
    let t1 = thr.clone();
    let t2 = thr.clone();
    push(
        "soft_binarization_confidence",
        check_input_op(
            seed,
            conf.clone(),
            wb.clone(),
            move |c| crate::locator::binarize_soft(c, &t1, tau),
            move |c, g| soft_binarization_backward(&crate::locator::binarize_soft(c, &t2, tau)?, g, tau).map(|(d, _)| d),
        )?,
    );
    let c1 = conf.clone();
    let c2 = conf.clone();
    push(
        "soft_binarization_threshold",
        check_input_op(
            seed,
            thr,
            wb,
            move |t| crate::locator::binarize_soft(&c1, t, tau),
            move |t, g| soft_binarization_backward(&crate::locator::binarize_soft(&c2, t, tau)?, g, tau).map(|(_, d)| d),
        )?,
    );

    // locator components
    let image = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let enc = Encoder::new("e", &mut rng);
    let feats = enc.forward(&image)?.features;
    let wf = rand_tensor(&mut rng, feats.shape(), -1.0, 1.0);
    let mut m = enc.clone();
    push(
        "encoder",
        grad_check(&mut m, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
            let t = m.forward(&image)?;
            m.backward(&t, &wf)?;
            Ok(dot(&t.features, &wf))
        })?,
    );
    let wc = rand_tensor(&mut rng, &[1, 8, 8], -1.0, 1.0);
    let mut dec = Decoder::new("d", &mut rng);
    push(
        "decoder",
        grad_check(&mut dec, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
            let t = m.forward(&feats)?;
            m.backward(&t, &wc)?;
            Ok(dot(&t.confidence, &wc))
        })?,
    );
    let dec_frozen = dec.clone();
    push(
        "decoder_input",
        check_input_op(seed, feats.clone(), wc.clone(), |f| Ok(dec_frozen.forward(f)?.confidence), |f, g| {
            dec_frozen.clone().backward(&dec_frozen.forward(f)?, g)
        })?,
    );
    let conf8 = rand_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
    let mut thn = ThresholdNet::new("t", &mut rng);
    push(
        "threshold_net",
        grad_check(&mut thn, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
            let t = m.forward(&feats, &conf8, &cfg)?;
            m.backward(&t, &wc, &cfg)?;
            Ok(dot(&t.threshold, &wc))
        })?,
    );
    let th_frozen = thn.clone();
    push(
        "threshold_net_confidence",
        check_input_op(seed, conf8.clone(), wc.clone(), |c| Ok(th_frozen.forward(&feats, c, &cfg)?.threshold), |c, g| {
            let t = th_frozen.forward(&feats, c, &cfg)?;
            th_frozen.clone().backward(&t, g, &cfg).map(|(_, d)| d)
        })?,
    );

    // losses
    let n = 16.0;
    let gt = Tensor::new(vec![1, 4, 4], (0..16).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect())?;
    let other_conf = rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
    let other_thr = rand_tensor(&mut rng, &[1, 4, 4], 0.2, 0.8);
    let other = crate::locator::LocatorOutput::from_maps(other_conf, other_thr, tau)?;
    let thr_fixed = rand_tensor(&mut rng, &[1, 4, 4], 0.2, 0.8);
    let loss_model = |p: &Param, loss: &dyn Fn(&crate::locator::LocatorOutput) -> Result<(f64, OutputGrads)>| -> Result<(f64, Tensor)> {
        let out = crate::locator::LocatorOutput::from_maps(p.value.clone(), thr_fixed.clone(), tau)?;
        let (v, g) = loss(&out)?;
        let (dc, _) = soft_binarization_backward(&out.binary_soft, &g.d_binary_soft, tau)?;
        let mut d = g.d_confidence.clone();
        d.add_assign(&dc)?;
        Ok((v * n, d.scale(n)))
    };
    let mut p = Param::new("conf", conf.clone());
    push(
        "erm_loss",
        grad_check(&mut p, GRAD_EPS, GRAD_COORDINATES, seed, |p| {
            let (v, d) = loss_model(p, &|o| erm_loss(o, &gt).map(|((a, b), g)| (a + b, g)))?;
            p.grad.add_assign(&d)?;
            Ok(v)
        })?,
    );
    let mut p = Param::new("conf", conf.clone());
    push(
        "consistency_loss",
        grad_check(&mut p, GRAD_EPS, GRAD_COORDINATES, seed, |p| {
            let (v, d) = loss_model(p, &|o| consistency_loss(o, &other))?;
            p.grad.add_assign(&d)?;
            Ok(v)
        })?,
    );
    let b = rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
    for (name, with_dice) in [("dpd_loss_dice_l1", true), ("dpd_loss_l1", false)] {
        let mut p = Param::new("a", rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0));
        push(
            name,
            grad_check(&mut p, GRAD_EPS, GRAD_COORDINATES, seed, |p| {
                let l = dpd_loss(&p.value, &b, with_dice)?;
                p.grad.add_scaled(&l.grad_a, n)?;
                Ok((l.dice + l.l1) * n)
            })?,
        );
    }
    let a_fixed = rand_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
    let mut p = Param::new("b", b.clone());
    push(
        "dpd_loss_second_argument",
        grad_check(&mut p, GRAD_EPS, GRAD_COORDINATES, seed, |p| {
            let l = dpd_loss(&a_fixed, &p.value, true)?;
            p.grad.add_scaled(&l.grad_b, n)?;
            Ok((l.dice + l.l1) * n)
        })?,
    );

    // full locator objective on a 16x16 scene, and the proxy branch
    let scene = sample_scenes(&tiny_spec(), seed, 1)?.remove(0);
    let mut loc = Locator::new("main", &mut rng);
    let npix = 256.0;
    push(
        "locator_erm",
        grad_check(&mut loc, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
            let t = m.forward(&scene.image, &cfg)?;
            let ((l2, l1), mut g) = erm_loss(&t.output, &scene.gt_binary)?;
            g.d_confidence = g.d_confidence.scale(npix);
            g.d_binary_soft = g.d_binary_soft.scale(npix);
            m.backward(&t, &g, &cfg)?;
            Ok((l2 + l1) * npix)
        })?,
    );
    let mut params = LocatorParams::new(seed);
    let main_soft = rand_tensor(&mut rng, &[1, 16, 16], 0.0, 1.0);
    let mut dpd = params.dpd_threshold.clone();
    push(
        "dpd_threshold_branch",
        grad_check(&mut dpd, GRAD_EPS, GRAD_COORDINATES, seed, |m| {
            // evaluate through the bundle so the real proxy path is exercised
            params.dpd_threshold = m.clone();
            params.dpd_threshold.zero_grad();
            let tr = params.forward_dpd_threshold(&scene.image, &cfg)?;
            let l = dpd_loss(&main_soft, &tr.binary_soft, true)?;
            params.backward_dpd(&tr, &l.grad_b.scale(npix), &cfg)?;
            let grads = params.dpd_threshold.params_cloned();
            let mut k = 0;
            m.visit_mut(&mut |p| {
                p.grad = grads[k].grad.clone();
                k += 1;
            });
            Ok((l.dice + l.l1) * npix)
        })?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        for c in gradient_suite(0).unwrap() {
            assert!(c.passed(), "{} max rel err {}", c.name, c.report.max_relative_error);
        }
    }

    #[test]
    fn suite_detects_a_corrupted_gradient() {
        // scaled-down analytic gradient must be caught
        let mut p = Param::new("x", Tensor::full(&[1, 2, 2], 0.3));
        let r = grad_check(&mut p, GRAD_EPS, 4, 0, |p| {
            let y = ops::sigmoid(&p.value);
            let g = ops::sigmoid_backward(&y, &Tensor::full(&[1, 2, 2], 10.0))?;
            p.grad.add_scaled(&g, 0.5)?;
            Ok(y.sum() * 10.0)
        })
        .unwrap();
        assert!(r.max_relative_error > GRAD_TOLERANCE);
    }
}
