use ndarray::{Array4, ArrayD, IxDyn};

use super::{join, slice, Mode, Module, Param, Tensor, TensorMut};
use crate::scalar::Scalar;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    channels: usize,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let c = self.channels;
        assert_eq!(x.dim().3, c, "batch norm channels");
        let src = slice(x);
        let rows = src.len() / c;
        let eps = T::of(EPS);

        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                for row in src.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let count = T::of(rows as f64);
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![T::zero(); c];
                for row in src.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);

                let momentum = T::of(MOMENTUM);
                let unbias = if rows > 1 { count / T::of(rows as f64 - 1.0) } else { T::one() };
                let rm = self.running_mean.as_slice_mut().expect("buffer");
                let rv = self.running_var.as_slice_mut().expect("buffer");
                for i in 0..c {
                    rm[i] = (T::one() - momentum) * rm[i] + momentum * mean[i];
                    rv[i] = (T::one() - momentum) * rv[i] + momentum * var[i] * unbias;
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = slice(&self.running_mean).to_vec();
                let inv_std = slice(&self.running_var)
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };

        let gamma = slice(&self.gamma.value);
        let beta = slice(&self.beta.value);
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut out = Array4::zeros(x.raw_dim());
        {
            let xh = xhat.as_slice_mut().expect("fresh");
            let dst = out.as_slice_mut().expect("fresh");
            for ((row, xr), dr) in src.chunks_exact(c).zip(xh.chunks_exact_mut(c)).zip(dst.chunks_exact_mut(c)) {
                for i in 0..c {
                    let z = (row[i] - mean[i]) * inv_std[i];
                    xr[i] = z;
                    dr[i] = gamma[i] * z + beta[i];
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some(NormCache { xhat, inv_std }),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let NormCache { xhat, inv_std } = self.cache.take().expect("BatchNorm2d::backward without a training forward pass");
        let c = self.channels;
        let g = slice(dy);
        let xh = slice(&xhat);
        let rows = g.len() / c;

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (gr, xr) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for i in 0..c {
                sum_dy[i] += gr[i];
                sum_dy_xhat[i] += gr[i] * xr[i];
            }
        }
        {
            let dg = self.gamma.grad.as_slice_mut().expect("grad");
            let db = self.beta.grad.as_slice_mut().expect("grad");
            for i in 0..c {
                dg[i] += sum_dy_xhat[i];
                db[i] += sum_dy[i];
            }
        }

        let gamma = slice(&self.gamma.value);
        let m = T::of(rows as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        let dst = dx.as_slice_mut().expect("fresh");
        for ((gr, xr), dr) in g.chunks_exact(c).zip(xh.chunks_exact(c)).zip(dst.chunks_exact_mut(c)) {
            for i in 0..c {
                let scale = gamma[i] * inv_std[i] / m;
                dr[i] = scale * (m * gr[i] - sum_dy[i] - xr[i] * sum_dy_xhat[i]);
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        f(&join(prefix, "gamma"), Tensor::Param(&self.gamma));
        f(&join(prefix, "beta"), Tensor::Param(&self.beta));
        f(&join(prefix, "running_mean"), Tensor::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Tensor::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        f(&join(prefix, "gamma"), TensorMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), TensorMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), TensorMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), TensorMut::Buffer(&mut self.running_var));
    }
}

/// Optional normalization slot: batch norm or the identity.
#[derive(Debug, Clone)]
pub enum Norm<T> {
    Batch(BatchNorm2d<T>),
    Identity,
}

impl<T: Scalar> Norm<T> {
    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        match self {
            Norm::Batch(bn) => bn.forward(&x, mode),
            Norm::Identity => x,
        }
    }

    pub fn backward(&mut self, dy: Array4<T>) -> Array4<T> {
        match self {
            Norm::Batch(bn) => bn.backward(&dy),
            Norm::Identity => dy,
        }
    }
}

impl<T: Scalar> Module<T> for Norm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        if let Norm::Batch(bn) = self {
            bn.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        if let Norm::Batch(bn) = self {
            bn.visit_mut(prefix, f);
        }
    }
}
