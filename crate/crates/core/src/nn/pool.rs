use ndarray::Array4;

use super::{slice, Mode};
use crate::scalar::Scalar;

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    // Winning offset (dy·2 + dx) per output element, plus the input dims.
    argmax: Option<(Vec<u8>, (usize, usize, usize, usize))>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, h, w, c) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let src = slice(x);
        let mut out = Array4::zeros((n, oh, ow, c));
        let mut arg = vec![0u8; n * oh * ow * c];
        let dst = out.as_slice_mut().expect("fresh");
        for s in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((s * oh + y) * ow + xx) * c;
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut which = 0u8;
                        for k in 0..4usize {
                            let (dy, dx) = (k / 2, k % 2);
                            let v = src[((s * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch];
                            if v > best || (v.is_nan() && !best.is_nan()) {
                                best = v;
                                which = k as u8;
                            }
                        }
                        dst[o + ch] = best;
                        arg[o + ch] = which;
                    }
                }
            }
        }
        self.argmax = match mode {
            Mode::Train => Some((arg, (n, h, w, c))),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (arg, (n, h, w, c)) = self.argmax.take().expect("MaxPool2x2::backward without a training forward pass");
        let (oh, ow) = (h / 2, w / 2);
        let g = slice(dy);
        let mut dx = Array4::zeros((n, h, w, c));
        let dst = dx.as_slice_mut().expect("fresh");
        for s in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((s * oh + y) * ow + xx) * c;
                    for ch in 0..c {
                        let k = arg[o + ch] as usize;
                        let (dy_, dx_) = (k / 2, k % 2);
                        dst[((s * h + 2 * y + dy_) * w + 2 * xx + dx_) * c + ch] += g[o + ch];
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn routes_gradient_to_the_maximum() {
        let x = Array::from_shape_vec((1, 2, 2, 1), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let mut pool = MaxPool2x2::new();
        let y = pool.forward(&x, Mode::Train);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dx = pool.backward(&Array4::from_elem((1, 1, 1, 1), 1.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
