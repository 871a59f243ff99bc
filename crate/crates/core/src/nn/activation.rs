use ndarray::Array4;

use super::Mode;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let y = x.mapv_into(|v| if v < T::zero() { T::zero() } else { v });
        if mode == Mode::Train {
            self.output = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, mut dy: Array4<T>) -> Array4<T> {
        let y = self.output.take().expect("Relu::backward without a training forward pass");
        dy.zip_mut_with(&y, |g, &v| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
        dy
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    output: Option<Array4<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let y = x.mapv_into(sigmoid);
        if mode == Mode::Train {
            self.output = Some(y.clone());
        }
        y
    }

    /// Output of the most recent training forward pass.
    pub fn last_output(&self) -> Option<&Array4<T>> {
        self.output.as_ref()
    }

    pub fn backward(&mut self, mut dy: Array4<T>) -> Array4<T> {
        let y = self.output.take().expect("Sigmoid::backward without a training forward pass");
        dy.zip_mut_with(&y, |g, &p| *g = *g * p * (T::one() - p));
        dy
    }
}
