//! Additive attention gate on a skip connection.
//!
//! Both inputs are projected by a 1×1 convolution and normalized, summed,
//! passed through ReLU, a 1×1 projection to one channel, normalization and
//! a sigmoid. The resulting per-pixel coefficient rescales the original
//! skip features.

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, slice, Conv2d, FeatureMap, Mode, Module, Norm, Relu, Sigmoid, Tensor, TensorMut};
use crate::nn::BatchNorm2d;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AttentionGate<T> {
    pub skip_projection: Conv2d<T>,
    pub skip_norm: Norm<T>,
    pub gate_projection: Conv2d<T>,
    pub gate_norm: Norm<T>,
    pub attention_projection: Conv2d<T>,
    pub attention_norm: Norm<T>,
    relu: Relu<T>,
    sigmoid: Sigmoid<T>,
    skip: Option<Array4<T>>,
    coefficients: Option<Array4<T>>,
}

/// Parameter set of one gate.
pub type AttentionGateParams<T> = AttentionGate<T>;

fn norm<T: Scalar>(batch_norm: bool, channels: usize) -> Norm<T> {
    if batch_norm {
        Norm::Batch(BatchNorm2d::new(channels))
    } else {
        Norm::Identity
    }
}

impl<T: Scalar> AttentionGate<T> {
    /// Intermediate width is half the skip width, at least one.
    pub fn new<R: Rng + ?Sized>(skip_channels: usize, gate_channels: usize, batch_norm: bool, rng: &mut R) -> Self {
        let inter = (skip_channels / 2).max(1);
        Self {
            skip_projection: Conv2d::new(skip_channels, inter, 1, rng),
            skip_norm: norm(batch_norm, inter),
            gate_projection: Conv2d::new(gate_channels, inter, 1, rng),
            gate_norm: norm(batch_norm, inter),
            attention_projection: Conv2d::new(inter, 1, 1, rng),
            attention_norm: norm(batch_norm, 1),
            relu: Relu::new(),
            sigmoid: Sigmoid::new(),
            skip: None,
            coefficients: None,
        }
    }

    pub fn inter_channels(&self) -> usize {
        self.skip_projection.out_channels()
    }

    pub fn skip_channels(&self) -> usize {
        self.skip_projection.in_channels()
    }

    pub fn gate_channels(&self) -> usize {
        self.gate_projection.in_channels()
    }

    /// Coefficients (batch, H, W, 1) from the most recent forward pass.
    pub fn coefficients(&self) -> Option<&Array4<T>> {
        self.coefficients.as_ref()
    }

    pub fn forward(&mut self, skip: &Array4<T>, gate: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (sd, gd) = (skip.shape(), gate.shape());
        if sd[..3] != gd[..3] {
            return Err(Error::shape("attention gate (batch, height, width)", &sd[..3], &gd[..3]));
        }
        if sd[3] != self.skip_channels() || gd[3] != self.gate_channels() {
            return Err(Error::shape(
                "attention gate channels (skip, gate)",
                &[self.skip_channels(), self.gate_channels()],
                &[sd[3], gd[3]],
            ));
        }
        let s = self.skip_projection.forward(skip, mode);
        let s = self.skip_norm.forward(s, mode);
        let g = self.gate_projection.forward(gate, mode);
        let g = self.gate_norm.forward(g, mode);
        let joined = self.relu.forward(s + g, mode);
        let z = self.attention_projection.forward(&joined, mode);
        let z = self.attention_norm.forward(z, mode);
        let a = self.sigmoid.forward(z, mode);
        let out = apply_coefficients(skip, &a);
        if mode == Mode::Train {
            self.skip = Some(skip.clone());
        }
        self.coefficients = Some(a);
        Ok(out)
    }

    /// Returns gradients with respect to (skip, gate).
    pub fn backward(&mut self, dout: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let skip = self.skip.take().expect("AttentionGate::backward without a training forward pass");
        let a = self.coefficients.as_ref().expect("coefficients cached");
        let c = skip.dim().3;

        let mut dskip = apply_coefficients(dout, a);
        let mut da = Array4::zeros(a.raw_dim());
        {
            let (g, x) = (slice(dout), slice(&skip));
            let dst = da.as_slice_mut().expect("fresh");
            for (p, d) in dst.iter_mut().enumerate() {
                *d = g[p * c..(p + 1) * c].iter().zip(&x[p * c..(p + 1) * c]).map(|(&u, &v)| u * v).sum();
            }
        }
        let dz = self.sigmoid.backward(da);
        let dz = self.attention_norm.backward(dz);
        let djoined = self.attention_projection.backward(&dz);
        let dsum = self.relu.backward(djoined);
        let ds = self.skip_norm.backward(dsum.clone());
        dskip += &self.skip_projection.backward(&ds);
        let dg = self.gate_norm.backward(dsum);
        let dgate = self.gate_projection.backward(&dg);
        (dskip, dgate)
    }

    /// Sets every projection weight and bias to zero.
    pub fn zero_projections(&mut self) {
        for conv in [&mut self.skip_projection, &mut self.gate_projection, &mut self.attention_projection] {
            conv.weight.value.fill(T::zero());
            conv.bias.value.fill(T::zero());
        }
    }
}

/// Gates `skip` by a (batch, H, W, 1) coefficient map, broadcasting over channels.
pub fn apply_coefficients<T: Scalar>(skip: &Array4<T>, coefficients: &Array4<T>) -> Array4<T> {
    let c = skip.dim().3;
    let mut out = skip.clone();
    let a = slice(coefficients);
    for (row, &w) in out.as_slice_mut().expect("standard layout").chunks_exact_mut(c).zip(a) {
        row.iter_mut().for_each(|v| *v *= w);
    }
    out
}

/// Runs one gate on feature maps and returns the gated skip features.
///
/// The gate signal must already be at the skip resolution.
pub fn attention_gate<T: Scalar>(
    skip: &FeatureMap<T>,
    gate: &FeatureMap<T>,
    params: &mut AttentionGateParams<T>,
    mode: Mode,
) -> Result<FeatureMap<T>> {
    let out = params.forward(skip.values(), gate.values(), mode)?;
    FeatureMap::new(out)
}

impl<T: Scalar> Module<T> for AttentionGate<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        self.skip_projection.visit(&join(prefix, "skip_projection"), f);
        self.skip_norm.visit(&join(prefix, "skip_norm"), f);
        self.gate_projection.visit(&join(prefix, "gate_projection"), f);
        self.gate_norm.visit(&join(prefix, "gate_norm"), f);
        self.attention_projection.visit(&join(prefix, "attention_projection"), f);
        self.attention_norm.visit(&join(prefix, "attention_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        self.skip_projection.visit_mut(&join(prefix, "skip_projection"), f);
        self.skip_norm.visit_mut(&join(prefix, "skip_norm"), f);
        self.gate_projection.visit_mut(&join(prefix, "gate_projection"), f);
        self.gate_norm.visit_mut(&join(prefix, "gate_norm"), f);
        self.attention_projection.visit_mut(&join(prefix, "attention_projection"), f);
        self.attention_norm.visit_mut(&join(prefix, "attention_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_projections_halve_the_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for batch_norm in [false, true] {
            let mut gate = AttentionGate::<f64>::new(4, 6, batch_norm, &mut rng);
            gate.zero_projections();
            let skip = Array::from_shape_fn((2, 4, 4, 4), |(a, b, c, d)| (a + b * c) as f64 - d as f64);
            let g = Array::from_shape_fn((2, 4, 4, 6), |(a, b, c, d)| (a * b + c + d) as f64);
            let out = gate.forward(&skip, &g, Mode::Train).unwrap();
            for (o, s) in out.iter().zip(skip.iter()) {
                assert!((o - 0.5 * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut gate = AttentionGate::<f32>::new(4, 4, false, &mut rng);
        let skip = Array4::zeros((1, 8, 8, 4));
        let g = Array4::zeros((1, 4, 4, 4));
        assert!(matches!(gate.forward(&skip, &g, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn inter_channels_is_half_the_skip_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(AttentionGate::<f32>::new(64, 64, true, &mut rng).inter_channels(), 32);
        assert_eq!(AttentionGate::<f32>::new(1, 8, true, &mut rng).inter_channels(), 1);
    }
}
