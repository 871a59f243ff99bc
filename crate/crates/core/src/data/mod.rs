//! Slice/mask pairs, preprocessing, scan-level splitting and distance maps.

mod io;
mod preprocess;
mod sdm;
mod split;
mod synth;

pub use io::{
    detect_layout, load_dataset, read_png_slice, save_mask_png, save_probability_png, write_png_dataset, Layout, LoadOptions,
};
pub use preprocess::{min_max_normalize, normalize_slice, preprocess, resize_bilinear, resize_nearest, Preprocess};
pub use sdm::signed_distance_map;
pub use split::{group_by_scan, make_split, DatasetSplit};
pub(crate) use split::held_out_count;
pub use synth::synth_blobs;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Default lung window in Hounsfield units.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// What a slice's pixel values currently mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelUnits {
    Hounsfield,
    /// Raw detector or file intensities (e.g. 8/16-bit PNG).
    Intensity,
    /// Already mapped to [0, 1].
    Normalized,
}

/// One 2-D CT slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CtSlice {
    pub pixels: Array2<f32>,
    /// (row, col) spacing in millimetres.
    pub spacing: (f64, f64),
    pub units: PixelUnits,
    pub source_id: String,
    /// Identifier of the scan this slice was cut from.
    pub scan_id: String,
}

impl CtSlice {
    pub fn new(pixels: Array2<f32>, units: PixelUnits, source_id: impl Into<String>, scan_id: impl Into<String>) -> Self {
        Self {
            pixels,
            spacing: (1.0, 1.0),
            units,
            source_id: source_id.into(),
            scan_id: scan_id.into(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Binary infection mask: 1 = infected, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pixels: Array2<u8>,
}

impl MaskImage {
    pub fn new(pixels: Array2<u8>) -> Result<Self> {
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::NonBinary("mask"));
        }
        Ok(Self { pixels })
    }

    /// Binarizes arbitrary label values by `v > 0`.
    pub fn from_labels<V: Copy + Into<u64>>(labels: &Array2<V>) -> Self {
        Self {
            pixels: labels.mapv(|v| u8::from(v.into() > 0)),
        }
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.pixels.len() as f64
    }
}

/// Signed Euclidean distance to the mask boundary, in pixels.
///
/// Negative inside the mask, positive outside; identically zero for masks
/// that are entirely foreground or entirely background.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceMap {
    pub phi: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: CtSlice,
    pub mask: MaskImage,
    pub sdm: Option<SignedDistanceMap>,
}

impl SamplePair {
    pub fn new(image: CtSlice, mask: MaskImage) -> Result<Self> {
        if image.dim() != mask.dim() {
            let (a, b) = (image.dim(), mask.dim());
            return Err(Error::shape("image/mask pair", &[a.0, a.1], &[b.0, b.1]));
        }
        Ok(Self { image, mask, sdm: None })
    }

    pub fn with_sdm(mut self) -> Self {
        self.ensure_sdm();
        self
    }

    pub fn ensure_sdm(&mut self) -> &SignedDistanceMap {
        if self.sdm.is_none() {
            self.sdm = Some(signed_distance_map(&self.mask));
        }
        self.sdm.as_ref().expect("just computed")
    }

    pub fn id(&self) -> &str {
        &self.image.source_id
    }

    /// Mirrors image, mask and distance map left-to-right.
    pub fn flipped(&self) -> Self {
        let flip_f = |a: &Array2<f32>| {
            let mut v = a.view();
            v.invert_axis(Axis(1));
            v.to_owned()
        };
        let mut mask = self.mask.pixels.view();
        mask.invert_axis(Axis(1));
        Self {
            image: CtSlice {
                pixels: flip_f(&self.image.pixels),
                ..self.image.clone()
            },
            mask: MaskImage { pixels: mask.to_owned() },
            sdm: self.sdm.as_ref().map(|s| SignedDistanceMap { phi: flip_f(&s.phi) }),
        }
    }
}

/// Stacks slice images into a (batch, H, W, 1) network input.
pub fn stack_images<T: crate::Scalar>(samples: &[&SamplePair]) -> Result<crate::nn::FeatureMap<T>> {
    let (h, w) = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?.image.dim();
    let mut out = ndarray::Array4::zeros((samples.len(), h, w, 1));
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != (h, w) {
            let d = s.image.dim();
            return Err(Error::shape("batch images", &[h, w], &[d.0, d.1]));
        }
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(2), 0)
            .assign(&s.image.pixels.mapv(|v| T::of(v as f64)));
    }
    crate::nn::FeatureMap::new(out)
}

/// Stacks masks into a (batch, H, W) target of zeros and ones.
pub fn stack_masks<T: crate::Scalar>(samples: &[&SamplePair]) -> ndarray::Array3<T> {
    let (h, w) = samples[0].mask.dim();
    let mut out = ndarray::Array3::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s.mask.pixels().mapv(|v| T::of(v as f64)));
    }
    out
}

/// Stacks distance maps, computing any that are missing.
pub fn stack_sdms<T: crate::Scalar>(samples: &[&SamplePair]) -> ndarray::Array3<T> {
    let (h, w) = samples[0].mask.dim();
    let mut out = ndarray::Array3::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        let computed;
        let sdm = match &s.sdm {
            Some(sdm) => sdm,
            None => {
                computed = signed_distance_map(&s.mask);
                &computed
            }
        };
        out.index_axis_mut(Axis(0), i).assign(&sdm.phi.mapv(|v| T::of(v as f64)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mask_rejects_non_binary() {
        assert!(MaskImage::new(array![[0, 1], [2, 0]]).is_err());
        let m = MaskImage::from_labels(&array![[0u8, 1], [2, 0]]);
        assert_eq!(m.pixels(), &array![[0, 1], [1, 0]]);
    }

    #[test]
    fn pair_rejects_shape_mismatch() {
        let img = CtSlice::new(Array2::zeros((4, 4)), PixelUnits::Normalized, "a", "a");
        let mask = MaskImage::new(Array2::zeros((4, 5))).unwrap();
        assert!(SamplePair::new(img, mask).is_err());
    }

    #[test]
    fn flip_mirrors_every_layer() {
        let img = CtSlice::new(array![[1.0, 2.0, 3.0]], PixelUnits::Normalized, "a", "a");
        let mask = MaskImage::new(array![[1, 0, 0]]).unwrap();
        let pair = SamplePair::new(img, mask).unwrap().with_sdm();
        let f = pair.flipped();
        assert_eq!(f.image.pixels, array![[3.0, 2.0, 1.0]]);
        assert_eq!(f.mask.pixels(), &array![[0, 0, 1]]);
        assert_eq!(f.sdm.unwrap().phi, array![[2.0, 1.0, -1.0]]);
    }
}
