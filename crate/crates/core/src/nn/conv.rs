use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Ix2};
use rand::Rng;

use super::{join, slice, Mode, Module, Param, Tensor, TensorMut};
use crate::scalar::Scalar;

/// Stride-1 convolution with an odd square kernel and zero "same" padding.
///
/// Weights are stored as a `(k·k·in, out)` matrix whose rows are ordered
/// (ky, kx, in_channel), so a forward pass is one matrix product per sample
/// over the unfolded input.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: Param::he_normal(&[fan_in, out_channels], fan_in, rng),
            bias: Param::zeros(&[out_channels]),
            kernel,
            in_channels,
            out_channels,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, h, w, c) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let co = self.out_channels;
        let mut out = Array4::zeros((n, h, w, co));
        let weight = self.weight2();
        {
            let dst = out.as_slice_mut().expect("fresh array");
            if self.kernel == 1 {
                let a = ArrayView2::from_shape((n * h * w, c), slice(x)).expect("contiguous input");
                let mut y = ArrayViewMut2::from_shape((n * h * w, co), dst).expect("contiguous output");
                general_mat_mul(T::one(), &a, &weight, T::zero(), &mut y);
            } else {
                let kkc = self.kernel * self.kernel * c;
                let mut cols = vec![T::zero(); h * w * kkc];
                let src = slice(x);
                for s in 0..n {
                    im2col(&src[s * h * w * c..(s + 1) * h * w * c], h, w, c, self.kernel, &mut cols);
                    let a = ArrayView2::from_shape((h * w, kkc), &cols[..]).expect("cols");
                    let mut y = ArrayViewMut2::from_shape((h * w, co), &mut dst[s * h * w * co..(s + 1) * h * w * co])
                        .expect("contiguous output");
                    general_mat_mul(T::one(), &a, &weight, T::zero(), &mut y);
                }
            }
            let bias = slice(&self.bias.value);
            for row in dst.chunks_exact_mut(co) {
                for (v, &b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
        self.input = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("Conv2d::backward without a training forward pass");
        let (n, h, w, c) = x.dim();
        let co = self.out_channels;
        assert_eq!(dy.dim(), (n, h, w, co), "conv gradient shape");
        let gy = slice(dy);

        {
            let db = self.bias.grad.as_slice_mut().expect("bias grad");
            for row in gy.chunks_exact(co) {
                for (g, &v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }

        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let mut dweight = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D weight grad");
        let mut dx = Array4::zeros((n, h, w, c));

        if self.kernel == 1 {
            let a = ArrayView2::from_shape((n * h * w, c), slice(&x)).expect("contiguous input");
            let g = ArrayView2::from_shape((n * h * w, co), gy).expect("contiguous grad");
            general_mat_mul(T::one(), &a.t(), &g, T::one(), &mut dweight);
            let mut dxa = ArrayViewMut2::from_shape((n * h * w, c), dx.as_slice_mut().expect("fresh"))
                .expect("contiguous dx");
            general_mat_mul(T::one(), &g, &weight.t(), T::zero(), &mut dxa);
        } else {
            let kkc = self.kernel * self.kernel * c;
            let mut cols = vec![T::zero(); h * w * kkc];
            let mut dcols = Array2::<T>::zeros((h * w, kkc));
            let src = slice(&x);
            let dst = dx.as_slice_mut().expect("fresh");
            for s in 0..n {
                im2col(&src[s * h * w * c..(s + 1) * h * w * c], h, w, c, self.kernel, &mut cols);
                let a = ArrayView2::from_shape((h * w, kkc), &cols[..]).expect("cols");
                let g = ArrayView2::from_shape((h * w, co), &gy[s * h * w * co..(s + 1) * h * w * co]).expect("grad");
                general_mat_mul(T::one(), &a.t(), &g, T::one(), &mut dweight);
                general_mat_mul(T::one(), &g, &weight.t(), T::zero(), &mut dcols);
                col2im(
                    dcols.as_slice().expect("fresh"),
                    h,
                    w,
                    c,
                    self.kernel,
                    &mut dst[s * h * w * c..(s + 1) * h * w * c],
                );
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        f(&join(prefix, "weight"), Tensor::Param(&self.weight));
        f(&join(prefix, "bias"), Tensor::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        f(&join(prefix, "weight"), TensorMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), TensorMut::Param(&mut self.bias));
    }
}

/// Unfolds one (h, w, c) image into `(h·w, k·k·c)` patch rows.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let kkc = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * kkc..(y * w + xx + 1) * kkc];
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let off = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&x[off..off + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto pixels.
fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let kkc = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * kkc..(y * w + xx + 1) * kkc];
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let off = (iy as usize * w + ix as usize) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, &s) in dx[off..off + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 transposed convolution: each input pixel paints a 2×2 block.
///
/// Weights are `(in, 4·out)` with columns ordered (dy, dx, out_channel).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    input: Option<Array4<T>>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_normal(&[in_channels, 4 * out_channels], in_channels, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, h, w, c) = x.dim();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let co = self.out_channels;
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let a = ArrayView2::from_shape((n * h * w, c), slice(x)).expect("contiguous input");
        let blocks = a.dot(&weight);
        let blocks = blocks.as_slice().expect("fresh");
        let bias = slice(&self.bias.value);

        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Array4::zeros((n, oh, ow, co));
        let dst = out.as_slice_mut().expect("fresh");
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let p = (s * h + y) * w + xx;
                    let block = &blocks[p * 4 * co..(p + 1) * 4 * co];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let off = ((s * oh + 2 * y + dy) * ow + 2 * xx + dx) * co;
                            let src = &block[(dy * 2 + dx) * co..(dy * 2 + dx + 1) * co];
                            for ((d, &v), &b) in dst[off..off + co].iter_mut().zip(src).zip(bias) {
                                *d = v + b;
                            }
                        }
                    }
                }
            }
        }
        self.input = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("ConvTranspose2x2::backward without a training forward pass");
        let (n, h, w, c) = x.dim();
        let co = self.out_channels;
        let (oh, ow) = (2 * h, 2 * w);
        assert_eq!(dy.dim(), (n, oh, ow, co), "transposed conv gradient shape");
        let gy = slice(dy);

        let mut gathered = Array2::<T>::zeros((n * h * w, 4 * co));
        {
            let g = gathered.as_slice_mut().expect("fresh");
            let db = self.bias.grad.as_slice_mut().expect("bias grad");
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let p = (s * h + y) * w + xx;
                        for dy_ in 0..2 {
                            for dx_ in 0..2 {
                                let off = ((s * oh + 2 * y + dy_) * ow + 2 * xx + dx_) * co;
                                let src = &gy[off..off + co];
                                g[p * 4 * co + (dy_ * 2 + dx_) * co..p * 4 * co + (dy_ * 2 + dx_ + 1) * co]
                                    .copy_from_slice(src);
                                for (b, &v) in db.iter_mut().zip(src) {
                                    *b += v;
                                }
                            }
                        }
                    }
                }
            }
        }

        let a = ArrayView2::from_shape((n * h * w, c), slice(&x)).expect("contiguous input");
        {
            let mut dweight = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D weight grad");
            general_mat_mul(T::one(), &a.t(), &gathered, T::one(), &mut dweight);
        }
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let dx = gathered.dot(&weight.t());
        dx.into_shape_with_order((n, h, w, c)).expect("dx shape")
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2x2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Tensor<'_, T>)) {
        f(&join(prefix, "weight"), Tensor::Param(&self.weight));
        f(&join(prefix, "bias"), Tensor::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, T>)) {
        f(&join(prefix, "weight"), TensorMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), TensorMut::Param(&mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Direct 4-loop convolution, independent of the unfold path.
    fn naive_conv(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (n, h, w, c) = x.dim();
        let k = conv.kernel();
        let pad = (k / 2) as isize;
        let co = conv.out_channels();
        let wt = conv.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        Array4::from_shape_fn((n, h, w, co), |(s, y, xx, o)| {
            let mut acc = conv.bias.value[[o]];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    let ix = xx as isize + kx as isize - pad;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += x[[s, iy as usize, ix as usize, ci]] * wt[[(ky * k + kx) * c + ci, o]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
        conv.bias.value.mapv_inplace(|_| 0.25);
        let x = Array::from_shape_fn((2, 5, 6, 3), |(a, b, c, d)| ((a * 7 + b * 3 + c * 5 + d) % 11) as f64 - 5.0);
        let fast = conv.forward(&x, Mode::Eval);
        let slow = naive_conv(&x, &conv);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x) - b> == <dx, x> for the input gradient of a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            let x = Array::from_shape_fn((1, 4, 4, 2), |(_, b, c, d)| (b as f64 - c as f64) * 0.3 + d as f64);
            let y = conv.forward(&x, Mode::Train);
            let dy = Array::from_shape_fn(y.raw_dim(), |(_, b, c, d)| ((b + 2 * c + d) % 5) as f64 - 2.0);
            let dx = conv.backward(&dy);
            let bias_term: f64 = dy
                .indexed_iter()
                .map(|((_, _, _, o), g)| g * conv.bias.value[[o]])
                .sum();
            let lhs: f64 = (&dy * &y).sum() - bias_term;
            let rhs: f64 = (&dx * &x).sum();
            assert!((lhs - rhs).abs() < 1e-9, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2x2::<f64>::new(4, 2, &mut rng);
        let x = Array4::from_elem((1, 3, 3, 4), 1.0);
        let y = up.forward(&x, Mode::Train);
        assert_eq!(y.dim(), (1, 6, 6, 2));
        // Every 2×2 block carries the same weights when the input is constant.
        assert_eq!(y[[0, 0, 0, 1]], y[[0, 2, 4, 1]]);
        let dx = up.backward(&Array4::from_elem(y.raw_dim(), 1.0));
        assert_eq!(dx.dim(), (1, 3, 3, 4));
    }
}
