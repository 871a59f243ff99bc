//! Layers with explicit forward/backward passes over NHWC feature maps.
//!
//! Every layer caches what its backward pass needs during a
//! [`Mode::Train`] forward call. Gradients accumulate into [`Param::grad`]
//! until cleared with [`Module::zero_grad`].

mod activation;
mod conv;
mod norm;
mod pool;
mod upsample;

pub use activation::{Relu, Sigmoid};
pub use conv::{Conv2d, ConvTranspose2x2};
pub use norm::{BatchNorm2d, Norm};
pub use pool::MaxPool2x2;
pub use upsample::Bilinear2x;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether a forward pass records state for backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Caches activations; batch normalization uses batch statistics.
    Train,
    /// No caching; batch normalization uses running statistics.
    Eval,
}

/// A batch of feature maps laid out as (batch, height, width, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    values: Array4<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Array4<T>) -> Result<Self> {
        if values.shape().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be positive, got {:?}",
                values.shape()
            )));
        }
        // Layers index raw slices; force row-major storage.
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(Self { values })
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            values: Array4::zeros((batch, height, width, channels)),
        }
    }

    pub fn values(&self) -> &Array4<T> {
        &self.values
    }

    pub fn into_values(self) -> Array4<T> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch(), self.height(), self.width(), self.channels()]
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization with the given fan-in.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(normal.sample(rng)));
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Borrowed view of one named tensor in a module's state.
pub enum Tensor<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a ArrayD<T>),
}

impl<T> Tensor<'_, T> {
    pub fn value(&self) -> &ArrayD<T> {
        match self {
            Tensor::Param(p) => &p.value,
            Tensor::Buffer(b) => b,
        }
    }
}

pub enum TensorMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut ArrayD<T>),
}

impl<T> TensorMut<'_, T> {
    pub fn value_mut(&mut self) -> &mut ArrayD<T> {
        match self {
            TensorMut::Param(p) => &mut p.value,
            TensorMut::Buffer(b) => b,
        }
    }
}

/// Uniform access to a module's parameters and buffers, in a stable order.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| {
            if let TensorMut::Param(p) = t {
                p.zero_grad();
            }
        });
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if let Tensor::Param(p) = t {
                n += p.value.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn check_dims(context: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Concatenates two maps along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (n, h, w, ca) = a.dim();
    let cb = b.dim().3;
    let mut out = Array4::zeros((n, h, w, ca + cb));
    let (src_a, src_b) = (slice(a), slice(b));
    let dst = out.as_slice_mut().expect("fresh array");
    for p in 0..n * h * w {
        dst[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&src_a[p * ca..(p + 1) * ca]);
        dst[p * (ca + cb) + ca..(p + 1) * (ca + cb)].copy_from_slice(&src_b[p * cb..(p + 1) * cb]);
    }
    out
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Scalar>(x: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let (n, h, w, c) = x.dim();
    let second = c - first;
    let mut a = Array4::zeros((n, h, w, first));
    let mut b = Array4::zeros((n, h, w, second));
    let src = slice(x);
    {
        let da = a.as_slice_mut().expect("fresh array");
        for p in 0..n * h * w {
            da[p * first..(p + 1) * first].copy_from_slice(&src[p * c..p * c + first]);
        }
    }
    let db = b.as_slice_mut().expect("fresh array");
    for p in 0..n * h * w {
        db[p * second..(p + 1) * second].copy_from_slice(&src[p * c + first..(p + 1) * c]);
    }
    (a, b)
}

#[inline]
pub(crate) fn slice<T, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> &[T] {
    a.as_slice().expect("feature maps are kept in standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Array::from_shape_fn((2, 3, 3, 2), |(n, y, x, c)| (n * 100 + y * 10 + x + c) as f64);
        let b = Array::from_shape_fn((2, 3, 3, 3), |(n, y, x, c)| -((n * 100 + y * 10 + x + c) as f64));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (2, 3, 3, 5));
        assert_eq!(cat[[1, 2, 0, 3]], b[[1, 2, 0, 1]]);
        let (a2, b2) = split_channels(&cat, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn feature_map_rejects_empty_dims() {
        assert!(FeatureMap::<f32>::new(Array4::zeros((0, 4, 4, 1))).is_err());
        assert!(FeatureMap::<f32>::new(Array4::zeros((1, 4, 4, 1))).is_ok());
    }
}
