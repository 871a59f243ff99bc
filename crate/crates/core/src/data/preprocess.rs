use ndarray::Array2;

use super::{CtSlice, MaskImage, PixelUnits, SamplePair, DEFAULT_HU_WINDOW};
use crate::error::{Error, Result};

/// Maps pixel values through `clip((v - low) / (high - low), 0, 1)`.
pub fn normalize_slice(slice: &CtSlice, window: (f64, f64)) -> Result<CtSlice> {
    let (low, high) = window;
    if !(low < high) {
        return Err(Error::InvalidArgument(format!("window low {low} must be below high {high}")));
    }
    let span = high - low;
    Ok(CtSlice {
        pixels: slice.pixels.mapv(|v| ((v as f64 - low) / span).clamp(0.0, 1.0) as f32),
        units: PixelUnits::Normalized,
        ..slice.clone()
    })
}

/// Per-slice min-max scaling to [0, 1]; constant slices map to zero.
pub fn min_max_normalize(slice: &CtSlice) -> CtSlice {
    let (lo, hi) = slice
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let pixels = if hi > lo {
        let span = (hi - lo) as f64;
        slice.pixels.mapv(|v| ((v - lo) as f64 / span) as f32)
    } else {
        Array2::zeros(slice.pixels.raw_dim())
    };
    CtSlice {
        pixels,
        units: PixelUnits::Normalized,
        ..slice.clone()
    }
}

fn source_coord(o: usize, from: usize, to: usize) -> (usize, usize, f32) {
    let s = ((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(from - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.clone();
    }
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, w, width)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = source_coord(y, h, height);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_nearest(src: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.clone();
    }
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y * h) / height).min(h - 1);
        let sx = ((x * w) / width).min(w - 1);
        src[[sy, sx]]
    })
}

/// Intensity normalization and square resize applied before training.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub hu_window: (f64, f64),
    /// Square side length; `None` keeps the native size.
    pub size: Option<usize>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            hu_window: DEFAULT_HU_WINDOW,
            size: Some(256),
        }
    }
}

/// Normalizes the image according to its units and resizes image and mask.
///
/// Any cached distance map is dropped since it no longer matches.
pub fn preprocess(pair: &SamplePair, options: &Preprocess) -> Result<SamplePair> {
    let mut image = match pair.image.units {
        PixelUnits::Hounsfield => normalize_slice(&pair.image, options.hu_window)?,
        PixelUnits::Intensity => min_max_normalize(&pair.image),
        PixelUnits::Normalized => pair.image.clone(),
    };
    let mut mask = pair.mask.clone();
    if let Some(size) = options.size {
        if size == 0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        image.pixels = resize_bilinear(&image.pixels, size, size);
        mask = MaskImage::new(resize_nearest(mask.pixels(), size, size))?;
    }
    SamplePair::new(image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn slice(values: Array2<f32>) -> CtSlice {
        CtSlice::new(values, PixelUnits::Hounsfield, "s", "scan")
    }

    #[test]
    fn lung_window_endpoints_and_midpoint() {
        let out = normalize_slice(&slice(array![[-1000.0, 400.0, -300.0, -2000.0, 3000.0]]), DEFAULT_HU_WINDOW).unwrap();
        assert_eq!(out.pixels, array![[0.0, 1.0, 0.5, 0.0, 1.0]]);
        assert_eq!(out.units, PixelUnits::Normalized);
    }

    #[test]
    fn inverted_window_is_an_error() {
        assert!(normalize_slice(&slice(array![[0.0]]), (400.0, -1000.0)).is_err());
        assert!(normalize_slice(&slice(array![[0.0]]), (1.0, 1.0)).is_err());
    }

    #[test]
    fn min_max_spans_unit_interval() {
        let out = min_max_normalize(&slice(array![[10.0, 20.0], [30.0, 50.0]]));
        assert_eq!(out.pixels, array![[0.0, 0.25], [0.5, 1.0]]);
        let flat = min_max_normalize(&slice(array![[7.0, 7.0]]));
        assert_eq!(flat.pixels, array![[0.0, 0.0]]);
    }

    #[test]
    fn resize_keeps_constant_images_and_binary_masks() {
        let img = Array2::from_elem((5, 7), 0.3f32);
        let out = resize_bilinear(&img, 8, 8);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let mask = array![[0u8, 1], [1, 0]];
        let big = resize_nearest(&mask, 4, 4);
        assert_eq!(big, array![[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]);
    }
}
