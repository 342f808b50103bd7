//! Layer operations with hand-written backward passes.
//!
//! Every forward has a matching `*_backward` that takes the upstream gradient
//! and returns the gradient with respect to the op's input (and, for
//! convolutions, the kernel and bias).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::{Param, ParamSet, Tensor};

fn check_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k_in, k, k2) = match kernel.shape() {
        &[a, b, c, d] => (a, b, c, d),
        other => {
            return Err(shape_err(
                "conv2d",
                "kernel rank",
                format!("expected [C_out,C_in,k,k], got {:?}", other),
            ))
        }
    };
    if k != k2 || k % 2 == 0 {
        return Err(shape_err("conv2d", "kernel k", format!("kernel must be square and odd, got {}x{}", k, k2)));
    }
    if k_in != c_in {
        return Err(shape_err(
            "conv2d",
            "C_in",
            format!("input has {} channels, kernel expects {}", c_in, k_in),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err("conv2d", "C_out", format!("bias shape {:?}, expected [{}]", bias.shape(), c_out)));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv2d stride must be 1 or 2, got {}", stride)));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err("conv2d", "H,W", format!("{}x{} input too small for k={} pad={}", h, w, k, pad)));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Ok((c_in, h, w, c_out, k, ho, wo))
}

/// Valid output column range `[lo, hi)` for a kernel tap at offset `kj`.
#[inline]
fn tap_range(kj: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + kj - pad < in_len
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi_excl = if in_len + pad > kj {
        ((in_len + pad - kj - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// 2-D cross-correlation over a `[C_in, H, W]` input.
///
/// Output size is `floor((H + 2*pad - k) / stride) + 1` per spatial axis.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out, k, ho, wo) = check_conv(input, kernel, bias, stride, pad)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                let (oi_lo, oi_hi) = tap_range(ki, pad, stride, h, ho);
                for kj in 0..k {
                    let wt = kd[((co * c_in + ci) * k + ki) * k + kj];
                    let (oj_lo, oj_hi) = tap_range(kj, pad, stride, w, wo);
                    for oi in oi_lo..oi_hi {
                        let ii = oi * stride + ki - pad;
                        let row_in = &xin[ii * w..(ii + 1) * w];
                        let row_out = &mut plane[oi * wo..(oi + 1) * wo];
                        if stride == 1 {
                            let off = kj as isize - pad as isize;
                            for oj in oj_lo..oj_hi {
                                row_out[oj] += wt * row_in[(oj as isize + off) as usize];
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                row_out[oj] += wt * row_in[oj * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w, c_out, k, ho, wo) = check_conv(input, kernel, bias, stride, pad)?;
    if grad_out.shape() != [c_out, ho, wo] {
        return Err(shape_err(
            "conv2d_backward",
            "grad_out",
            format!("expected {:?}, got {:?}", [c_out, ho, wo], grad_out.shape()),
        ));
    }
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; c_in * h * w];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; c_out];
    for co in 0..c_out {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        db[co] = gplane.iter().sum();
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                let (oi_lo, oi_hi) = tap_range(ki, pad, stride, h, ho);
                for kj in 0..k {
                    let widx = ((co * c_in + ci) * k + ki) * k + kj;
                    let wt = kd[widx];
                    let (oj_lo, oj_hi) = tap_range(kj, pad, stride, w, wo);
                    let mut acc = 0.0;
                    for oi in oi_lo..oi_hi {
                        let ii = oi * stride + ki - pad;
                        let grow = &gplane[oi * wo..(oi + 1) * wo];
                        for oj in oj_lo..oj_hi {
                            let jj = oj * stride + kj - pad;
                            let gv = grow[oj];
                            acc += gv * xin[ii * w + jj];
                            dxin[ii * w + jj] += gv * wt;
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

/// A convolution layer owning its kernel and bias parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Glorot-initialized `k x k` convolution in "same" padding mode.
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Self {
            kernel: Param::glorot(format!("{name}.kernel"), &[c_out, c_in, k, k], fan_in, fan_out, rng),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernel.value, &self.bias.value, self.stride, self.pad)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, dk, db) = conv2d_backward(input, &self.kernel.value, &self.bias.value, self.stride, self.pad, grad_out)?;
        self.kernel.grad.add_assign(&dk)?;
        self.bias.grad.add_assign(&db)?;
        Ok(dx)
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.kernel);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `input` is the pre-activation.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(math::sigmoid)
}

/// `output` is the sigmoid output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, "sigmoid_backward", |s, g| g * s * (1.0 - s))
}

/// Interpolation table for one axis: `(lo, hi, frac)` per output index.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (math::floor(pos) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with aligned corners, so the
/// four corner values of every channel are preserved exactly.
pub fn bilinear_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("bilinear_upsample factor must be >= 1".into()));
    }
    let (c, h, w) = input.dims3()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let rows = bilinear_axis(h, ho);
    let cols = bilinear_axis(w, wo);
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let plane = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = xin[r0 * w + c0] * (1.0 - fc) + xin[r0 * w + c1] * fc;
                let bot = xin[r1 * w + c0] * (1.0 - fc) + xin[r1 * w + c1] * fc;
                plane[oi * wo + oj] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn bilinear_upsample_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        other => return Err(shape_err("bilinear_upsample_backward", "rank", format!("{:?}", other))),
    };
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    if grad_out.shape() != [c, ho, wo] {
        return Err(shape_err(
            "bilinear_upsample_backward",
            "grad_out",
            format!("expected {:?}, got {:?}", [c, ho, wo], grad_out.shape()),
        ));
    }
    let rows = bilinear_axis(h, ho);
    let cols = bilinear_axis(w, wo);
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
        let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let gv = gp[oi * wo + oj];
                dp[r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                dp[r0 * w + c1] += gv * (1.0 - fr) * fc;
                dp[r1 * w + c0] += gv * fr * (1.0 - fc);
                dp[r1 * w + c1] += gv * fr * fc;
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

/// Non-overlapping `k x k` mean pooling. H and W must be divisible by `k`.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err("avg_pool", "H,W", format!("{}x{} not divisible by {}", h, w, k)));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = out.at3(ch, i / k, j / k) + input.at3(ch, i, j) * inv;
                out.set3(ch, i / k, j / k, v);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        other => return Err(shape_err("avg_pool_backward", "rank", format!("{:?}", other))),
    };
    let inv = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx.set3(ch, i, j, grad_out.at3(ch, i / k, j / k) * inv);
            }
        }
    }
    Ok(dx)
}

/// Channelwise modulation: every channel of `features` is multiplied by the
/// single-channel `map` at the same spatial position.
pub fn modulate(features: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    if map.shape() != [1, h, w] {
        return Err(shape_err("modulate", "map", format!("expected [1,{},{}], got {:?}", h, w, map.shape())));
    }
    let m = map.data();
    let mut out = features.clone();
    for ch in 0..c {
        for (v, &s) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(m) {
            *v *= s;
        }
    }
    Ok(out)
}

/// Returns `(d_features, d_map)`.
pub fn modulate_backward(features: &Tensor, map: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = features.dims3()?;
    let d_feat = modulate(grad_out, map)?;
    let mut d_map = Tensor::zeros(&[1, h, w]);
    let f = features.data();
    let g = grad_out.data();
    for ch in 0..c {
        for (idx, dm) in d_map.data_mut().iter_mut().enumerate() {
            let p = ch * h * w + idx;
            *dm += f[p] * g[p];
        }
    }
    Ok((d_feat, d_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops over (c_out, i, j, c_in, ki, kj).
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci_n, h, w) = x.dims3().unwrap();
        let (co_n, ks) = (k.shape()[0], k.shape()[2]);
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[co_n, ho, wo]);
        for co in 0..co_n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.data()[co];
                    for ci in 0..ci_n {
                        for ki in 0..ks {
                            for kj in 0..ks {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += x.at3(ci, ii as usize, jj as usize)
                                        * k.data()[((co * ci_n + ci) * ks + ki) * ks + kj];
                                }
                            }
                        }
                    }
                    out.set3(co, i, j, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_full_overlap_sum() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[1, 5, 6], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[2, 4, 4], &mut rng);
        let k = random_tensor(&[3, 2, 3, 3], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        for stride in [1, 2] {
            let y = conv2d(&x, &k, &b, stride, 1).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &k, &b, stride, 1)) <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1) {
            Err(Error::Shape { axes, .. }) => assert_eq!(axes, "C_in"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data()[0], 0.5);
        assert_eq!(relu(&Tensor::scalar(-2.5)).data()[0], 0.0);
        let s = sigmoid(&Tensor::new(vec![3], vec![-800.0, 0.0, 800.0]).unwrap());
        assert!(s.is_finite());
    }

    #[test]
    fn upsample_2x2_by_2() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.at3(0, 0, 0), 0.0);
        assert_eq!(y.at3(0, 0, 3), 1.0);
        assert_eq!(y.at3(0, 3, 0), 2.0);
        assert_eq!(y.at3(0, 3, 3), 3.0);
        // closed form f(r, c) = 2r/3*... : value = 2*(i/3) + (j/3) on the aligned grid
        for i in 0..4 {
            for j in 0..4 {
                let expect = 2.0 * (i as f64 / 3.0) + j as f64 / 3.0;
                assert!((y.at3(0, i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_and_modulate_shapes() {
        let x = Tensor::full(&[2, 4, 4], 2.0);
        let p = avg_pool(&x, 4).unwrap();
        assert_eq!(p.shape(), &[2, 1, 1]);
        assert_eq!(p.data(), &[2.0, 2.0]);
        assert!(avg_pool(&Tensor::zeros(&[1, 5, 4]), 4).is_err());
        let m = Tensor::full(&[1, 4, 4], 0.5);
        assert_eq!(modulate(&x, &m).unwrap().data()[0], 1.0);
    }
}
