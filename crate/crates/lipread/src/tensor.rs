//! N-dimensional tensor storage.
//!
//! Storage is a shared row-major buffer of a real scalar type. The engine is
//! generic over [`Scalar`] so the same operator code runs in `f32` (the
//! production type) and in `f64` (used by the gradient-check suites, where
//! finite differencing needs 64-bit forward arithmetic). Reductions and
//! matmul always accumulate in `f64` regardless of the storage type.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::NodeId;

/// Real scalar storable in a [`Tensor`].
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_s(self, o: Self) -> Self {
        if self > o {
            self
        } else {
            o
        }
    }
    fn min_s(self, o: Self) -> Self {
        if self < o {
            self
        } else {
            o
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// N-dimensional real array with row-major storage and an optional autodiff
/// node handle. Cloning is cheap (the buffer is shared).
#[derive(Debug, Clone)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    pub(crate) node: Option<NodeId>,
    pub(crate) requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Shape("shape overflow".into()))?;
    }
    Ok(n)
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::from_vec(shape, vec![E::ZERO; n])
    }

    pub fn constant(shape: &[usize], c: E) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::from_vec(shape, vec![c; n])
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| E::from_f64(rng.uniform(lo, hi))).collect();
        Self::from_vec(shape, data)
    }

    /// Kaiming initialization: zero-mean normal with std = sqrt(2 / fan_in).
    pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::Contract("kaiming: fan_in must be positive".into()));
        }
        let n = check_shape(shape)?;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
        Self::from_vec(shape, data)
    }

    pub fn scalar(c: E) -> Self {
        Tensor::from_vec(&[1], vec![c]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// View with a new shape of the same element count. Does not record on a
    /// tape; use `ops::reshape` for a differentiable reshape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({n} values)",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            node: None,
            requires_grad: false,
        })
    }

    /// Detached copy: same storage, no tape association.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
            requires_grad: false,
        }
    }

    pub(crate) fn with_node(&self, node: NodeId) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(node),
            requires_grad: true,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mutable access to the buffer; clones it if shared. Only used by the
    /// optimizer and data pipeline, never on tape-tracked tensors.
    pub fn data_mut(&mut self) -> &mut Vec<E> {
        debug_assert!(self.node.is_none());
        Arc::make_mut(&mut self.data)
    }

    /// Cast to another scalar type.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|x| F::from_f64(x.to_f64())).collect();
        Tensor::from_vec(&self.shape, data).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_case() {
        let t: Tensor = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_case() {
        let t: Tensor = Tensor::constant(&[1], 5.0).unwrap();
        assert_eq!(t.data(), &[5.0]);
    }

    #[test]
    fn uniform_is_deterministic() {
        let a: Tensor = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut Rng::new(7)).unwrap();
        let b: Tensor = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut Rng::new(7)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn reshape_preserves_count() {
        let t: Tensor = Tensor::zeros(&[2, 3]).unwrap();
        assert!(t.reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn kaiming_scale() {
        let t: Tensor = Tensor::kaiming(&[64, 64], 64, &mut Rng::new(1)).unwrap();
        let var = t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / t.numel() as f64;
        // std should be near sqrt(2/64)
        assert!((var - 2.0 / 64.0).abs() < 0.01, "var={var}");
    }
}
