use ndarray::Array4;

use super::{slice, Mode};
use crate::scalar::Scalar;

/// Bilinear 2× upsampling with half-pixel centers and edge clamping.
#[derive(Debug, Clone, Default)]
pub struct Bilinear2x {
    input_dims: Option<(usize, usize, usize, usize)>,
}

/// Two source taps and weights for each output index along one axis.
fn taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let neighbor = if o % 2 == 0 { i.checked_sub(1) } else { Some(i + 1).filter(|&j| j < n) };
            match neighbor {
                Some(j) => [(i, 0.75), (j, 0.25)],
                None => [(i, 1.0), (i, 0.0)],
            }
        })
        .collect()
}

impl Bilinear2x {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, h, w, c) = x.dim();
        let (ty, tx) = (taps(h), taps(w));
        let src = slice(x);
        let mut out = Array4::zeros((n, 2 * h, 2 * w, c));
        let dst = out.as_slice_mut().expect("fresh");
        for s in 0..n {
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    let o = ((s * 2 * h + oy) * 2 * w + ox) * c;
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            let wgt = T::of(wy * wx);
                            if wgt == T::zero() {
                                continue;
                            }
                            let i = ((s * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                dst[o + ch] += wgt * src[i + ch];
                            }
                        }
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.input_dims = Some((n, h, w, c));
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (n, h, w, c) = self.input_dims.take().expect("Bilinear2x::backward without a training forward pass");
        let (ty, tx) = (taps(h), taps(w));
        let g = slice(dy);
        let mut dx = Array4::zeros((n, h, w, c));
        let dst = dx.as_slice_mut().expect("fresh");
        for s in 0..n {
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    let o = ((s * 2 * h + oy) * 2 * w + ox) * c;
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            let wgt = T::of(wy * wx);
                            if wgt == T::zero() {
                                continue;
                            }
                            let i = ((s * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                dst[i + ch] += wgt * g[o + ch];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
