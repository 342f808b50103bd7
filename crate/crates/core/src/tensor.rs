//! Dense row-major tensors and trainable parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::math;

/// Dense, row-major, 64-bit tensor with explicit shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                "shape/data",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(shape_err(
                "dims3",
                "rank",
                format!("expected [C,H,W], got {:?}", other),
            )),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let h = self.shape[1];
        let w = self.shape[2];
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let h = self.shape[1];
        let w = self.shape[2];
        self.data[(c * h + i) * w + j] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                "all",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        self.expect_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max)
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform initialization in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
        Self::new(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns an ordered collection of [`Param`]s.
///
/// The visiting order is stable and defines checkpoint layout and optimizer
/// state alignment.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn params_cloned(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.clone()));
        out
    }

    /// Copies values from `other`, which must have the same layout.
    fn copy_values_from(&mut self, other: &dyn ParamSet) -> Result<()> {
        let mut values = Vec::new();
        other.visit(&mut |p| values.push(p.value.clone()));
        let mut idx = 0;
        let mut err = None;
        self.visit_mut(&mut |p| {
            match values.get(idx) {
                Some(v) if v.shape() == p.value.shape() => p.value = v.clone(),
                _ => {
                    if err.is_none() {
                        err = Some(Error::Shape {
                            op: "copy_values_from",
                            axes: "param layout",
                            detail: format!("mismatch at parameter {} ({})", idx, p.name),
                        });
                    }
                }
            }
            idx += 1;
        });
        if idx != values.len() && err.is_none() {
            err = Some(Error::Shape {
                op: "copy_values_from",
                axes: "param count",
                detail: format!("{} vs {}", idx, values.len()),
            });
        }
        err.map_or(Ok(()), Err)
    }
}

impl ParamSet for Vec<Param> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(f);
    }
}

impl ParamSet for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn glorot_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Param::glorot("w", &[4, 3, 3, 3], 27, 36, &mut rng);
        let a = math::sqrt(6.0 / 63.0);
        assert!(p.value.data().iter().all(|v| v.abs() <= a));
        assert_eq!(p.grad.shape(), p.value.shape());
    }

    #[test]
    fn copy_values_checks_layout() {
        let mut a = vec![Param::new("a", Tensor::zeros(&[2]))];
        let b = vec![Param::new("a", Tensor::full(&[2], 1.5))];
        a.copy_values_from(&b).unwrap();
        assert_eq!(a[0].value.data(), &[1.5, 1.5]);
        let c = vec![Param::new("a", Tensor::zeros(&[3]))];
        assert!(a.copy_values_from(&c).is_err());
    }
}
