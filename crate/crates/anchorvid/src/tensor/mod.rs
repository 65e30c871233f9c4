//! Dense f64 tensors and the reverse-mode differentiation engine built on them.
//!
//! [`Tensor`] is an immutable shape + flat buffer pair used for everything that
//! flows through the system: latents, model activations, parameters, audio
//! features. All math is f64 and single-threaded, so results are bit-identical
//! across runs for identical inputs. Any operation that would produce NaN or
//! Inf reports an error instead of letting the poison spread.
//!
//! [`Value`](value::Value) wraps a tensor in a computation-graph node for the
//! training path; see [`value`] and [`autograd`].

mod adam;
mod autograd;
mod checkpoint;
mod kernels;
mod params;
mod value;

pub use adam::{Adam, AdamConfig};
pub use autograd::backward_named;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{finite_diff_grad, ParamBinding, ParamStore};
pub use value::{RopeTables, Value};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Immutable dense tensor: a shape and a flat row-major f64 buffer.
///
/// Cloning is cheap (the buffer is shared). Operations allocate fresh output
/// buffers; nothing mutates in place.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and a matching flat buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    /// Every element set to `fill`.
    pub fn full(shape: &[usize], fill: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![fill; numel]),
        }
    }

    /// Scalar tensor (shape `[1]`).
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    /// Uniform init on [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of rows when viewed as 2-D (`shape[0]`).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row length when viewed as 2-D (product of trailing dims).
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        probe_finite(&self.data)
    }

    /// Error with the given op label unless every element is finite.
    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Elementwise sum with an identically shaped tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    /// Elementwise difference with an identically shaped tensor.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise product with an identically shaped tensor.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    /// Every element multiplied by `s`.
    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|v| v * s).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
        .check_finite("scale")
    }

    /// `self + s * other`, the workhorse for latent-space blending.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_with("axpy", other, |a, b| a + s * b)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let n = self.numel().max(1) as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        if !sum.is_finite() {
            return Err(Error::NonFinite { op: "mse" });
        }
        Ok(sum / n)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean of all elements (0 for empty tensors).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.numel() as f64
        }
    }

    /// L2 norm of the flattened buffer.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
        .check_finite(op)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }
}

impl PartialEq for Tensor {
    /// Bit-exact equality: same shape and identical f64 bits.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Fast finiteness probe: sum the buffer (one vectorizable pass) and only fall
/// back to the exact elementwise scan when the probe trips. The probe can
/// overflow on legitimately finite but astronomically large data, which the
/// exact scan then clears.
pub(crate) fn probe_finite(data: &[f64]) -> bool {
    let sum: f64 = data.iter().sum();
    if sum.is_finite() {
        return true;
    }
    data.iter().all(|v| v.is_finite())
}

/// Largest absolute element difference between two same-shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "max_abs_diff",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[1.5, 2.5, 3.5, 4.5]);
        assert_eq!(a.sub(&b).unwrap().data(), &[0.5, 1.5, 2.5, 3.5]);
        assert_eq!(a.mul(&b).unwrap().data(), &[0.5, 1.0, 1.5, 2.0]);
        assert_eq!(a.scale(2.0).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(a.axpy(2.0, &b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.add(&b).is_err());
        assert!(a.mse(&b).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Tensor::from_vec(vec![2], vec![f64::MAX, f64::MAX]).unwrap();
        assert!(a.scale(2.0).is_err());
        let b = Tensor::from_vec(vec![1], vec![f64::NAN]).unwrap();
        assert!(!b.all_finite());
        assert!(b.clone().check_finite("test").is_err());
    }

    #[test]
    fn finite_probe_clears_large_but_finite_sums() {
        // Each element is finite; the probe sum overflows, the exact scan passes.
        let big = Tensor::from_vec(vec![4], vec![1e308, 1e308, 1e308, 1e308]).unwrap();
        assert!(big.all_finite());
    }

    #[test]
    fn mse_matches_hand_computation() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        // ((1)^2 + (2)^2) / 2 = 2.5
        assert_eq!(a.mse(&b).unwrap(), 2.5);
    }

    #[test]
    fn reshape_shares_the_buffer() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(a.data(), b.data());
        assert!(a.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn determinism_bit_identical() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::randn(&[4, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
