use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{Module, TensorMut};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Per-tensor optimizer state, in the model's parameter visit order.
#[derive(Debug, Clone)]
pub struct Slot<T> {
    pub name: String,
    /// Adam first moment, or the SGD momentum buffer.
    pub first: ArrayD<T>,
    /// Adam second moment; empty for SGD.
    pub second: Option<ArrayD<T>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    pub slots: Vec<Slot<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            slots: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients. Does not clear them.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.steps += 1;
        let t = self.steps as f64;
        let lr = self.lr;
        let kind = self.kind;
        let slots = &mut self.slots;
        let mut i = 0;
        model.visit_mut("", &mut |name, tensor| {
            let TensorMut::Param(p) = tensor else { return };
            if slots.len() == i {
                slots.push(Slot {
                    name: name.to_string(),
                    first: ArrayD::zeros(p.value.raw_dim()),
                    second: (kind == OptimizerKind::Adam).then(|| ArrayD::zeros(p.value.raw_dim())),
                });
            }
            let slot = &mut slots[i];
            i += 1;
            match kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                    let step_size = T::of(lr * (1.0 - ADAM_BETA2.powf(t)).sqrt() / (1.0 - ADAM_BETA1.powf(t)));
                    let eps = T::of(ADAM_EPS * (1.0 - ADAM_BETA2.powf(t)).sqrt());
                    let second = slot.second.as_mut().expect("adam slot");
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut slot.first)
                        .and(second)
                        .for_each(|w, &g, m, v| {
                            *m = b1 * *m + (T::one() - b1) * g;
                            *v = b2 * *v + (T::one() - b2) * g * g;
                            *w -= step_size * *m / (v.sqrt() + eps);
                        });
                }
                OptimizerKind::Sgd => {
                    let (mu, lr) = (T::of(SGD_MOMENTUM), T::of(lr));
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut slot.first)
                        .for_each(|w, &g, b| {
                            *b = mu * *b + g;
                            *w -= lr * *b;
                        });
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Tensor};

    struct Quadratic {
        x: Param<f64>,
    }

    impl Module<f64> for Quadratic {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, f64>)) {
            f(prefix, Tensor::Param(&self.x));
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, f64>)) {
            f(prefix, TensorMut::Param(&mut self.x));
        }
    }

    fn minimize(kind: OptimizerKind, lr: f64) -> f64 {
        let mut q = Quadratic { x: Param::filled(&[2], 3.0) };
        let mut opt = Optimizer::new(kind, lr);
        for _ in 0..500 {
            q.zero_grad();
            q.x.grad = q.x.value.mapv(|v| 2.0 * (v - 1.0));
            opt.step(&mut q);
        }
        q.x.value[[0]]
    }

    #[test]
    fn both_optimizers_find_the_minimum() {
        assert!((minimize(OptimizerKind::Adam, 0.05) - 1.0).abs() < 1e-3);
        assert!((minimize(OptimizerKind::Sgd, 0.01) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut q = Quadratic { x: Param::filled(&[1], 0.0) };
        q.x.grad.fill(123.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
        opt.step(&mut q);
        assert!((q.x.value[[0]] + 1e-3).abs() < 1e-9);
    }
}
