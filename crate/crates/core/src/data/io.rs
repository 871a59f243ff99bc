use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{CtSlice, MaskImage, PixelUnits, SamplePair};
use crate::error::{Error, Result};

/// On-disk arrangement of a dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `images/*.nii[.gz]` paired with `masks/*.nii[.gz]`, slices along the last axis.
    Nifti,
    /// `images/*.png` paired with `masks/*.png` of the same name.
    PngPairs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Label value marking infection; `None` keeps every nonzero label.
    pub label: Option<u32>,
}

impl LoadOptions {
    fn binarize(&self, v: f64) -> u8 {
        match self.label {
            Some(l) => u8::from(v.round() as i64 == l as i64),
            None => u8::from(v > 0.0),
        }
    }
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default()
}

/// Picks the layout from the files under `root/images`.
pub fn detect_layout(root: &Path) -> Result<Layout> {
    let files = list_dir(&root.join("images"))?;
    if files.iter().any(|p| nifti_stem(file_name(p)).is_some()) {
        Ok(Layout::Nifti)
    } else if files.iter().any(|p| file_name(p).ends_with(".png")) {
        Ok(Layout::PngPairs)
    } else {
        Err(Error::EmptyDataset(root.to_path_buf()))
    }
}

/// Loads every slice under `root`. Images are returned un-normalized.
pub fn load_dataset(root: &Path, layout: Layout, options: LoadOptions) -> Result<Vec<SamplePair>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let samples = match layout {
        Layout::PngPairs => load_png_pairs(root, options)?,
        Layout::Nifti => load_nifti(root, options)?,
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(samples)
}

/// PNG slices named `<scan>_<index>.png` share the scan `<scan>`; any other
/// name is its own scan.
fn png_scan_id(stem: &str) -> &str {
    match stem.rsplit_once('_') {
        Some((scan, idx)) if !scan.is_empty() && !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => scan,
        _ => stem,
    }
}

fn read_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.into_luma8().into_raw().into_iter().map(f32::from).collect()
        }
        other => other.into_luma16().into_raw().into_iter().map(f32::from).collect(),
    };
    Ok(Array2::from_shape_vec((h, w), values).expect("decoded buffer matches dimensions"))
}

fn load_png_pairs(root: &Path, options: LoadOptions) -> Result<Vec<SamplePair>> {
    let mask_dir = root.join("masks");
    let mut out = Vec::new();
    for path in list_dir(&root.join("images"))? {
        let name = file_name(&path);
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        let mask_path = mask_dir.join(name);
        if !mask_path.is_file() {
            return Err(Error::MissingMask(path));
        }
        let pixels = read_png(&path)?;
        let labels = read_png(&mask_path)?;
        if pixels.dim() != labels.dim() {
            let (a, b) = (pixels.dim(), labels.dim());
            return Err(Error::shape("image/mask pair", &[a.0, a.1], &[b.0, b.1]));
        }
        let mask = MaskImage::new(labels.mapv(|v| options.binarize(v as f64)))?;
        let image = CtSlice::new(pixels, PixelUnits::Intensity, stem, png_scan_id(stem));
        out.push(SamplePair::new(image, mask)?);
    }
    Ok(out)
}

fn read_volume(path: &Path) -> Result<(ndarray::Array3<f32>, (f64, f64))> {
    let nifti_err = |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let pixdim = obj.header().pixdim;
    let vol = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err)?;
    let vol = match vol.ndim() {
        2 => vol.insert_axis(Axis(2)),
        3 => vol,
        n => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected a 2-D or 3-D volume, got {n} dimensions",
                path.display()
            )))
        }
    };
    let vol = vol.into_dimensionality::<Ix3>().expect("rank checked");
    Ok((vol, (pixdim[2] as f64, pixdim[1] as f64)))
}

fn load_nifti(root: &Path, options: LoadOptions) -> Result<Vec<SamplePair>> {
    let mask_dir = root.join("masks");
    let mut out = Vec::new();
    for path in list_dir(&root.join("images"))? {
        let name = file_name(&path);
        let Some(stem) = nifti_stem(name) else {
            continue;
        };
        let mask_path = [".nii.gz", ".nii"]
            .iter()
            .map(|ext| mask_dir.join(format!("{stem}{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingMask(path.clone()))?;
        let (vol, spacing) = read_volume(&path)?;
        let (labels, _) = read_volume(&mask_path)?;
        if vol.shape() != labels.shape() {
            return Err(Error::shape("image/mask volume", vol.shape(), labels.shape()));
        }
        for k in 0..vol.dim().2 {
            // Volumes index (x, y); slices are stored row-major as (y, x).
            let pixels = vol.index_axis(Axis(2), k).t().to_owned();
            let mask = labels.index_axis(Axis(2), k).t().mapv(|v| options.binarize(v as f64));
            let mut image = CtSlice::new(pixels, PixelUnits::Hounsfield, format!("{stem}_{k:04}"), stem);
            image.spacing = spacing;
            out.push(SamplePair::new(image, MaskImage::new(mask)?)?);
        }
    }
    Ok(out)
}

/// Writes samples in the PNG-pair layout: 16-bit images scaled from [0, 1]
/// and 8-bit masks with values {0, 255}.
pub fn write_png_dataset(samples: &[SamplePair], root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let (h, w) = s.image.dim();
        let raw: Vec<u16> = s
            .image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
        let name = format!("{}.png", s.id());
        let path = images.join(&name);
        img.save(&path).map_err(|source| Error::Image { path, source })?;

        let mask_raw: Vec<u8> = s.mask.pixels().iter().map(|&v| v * 255).collect();
        let mask = GrayImage::from_raw(w as u32, h as u32, mask_raw).expect("sized buffer");
        let path = masks.join(&name);
        mask.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Reads one grayscale PNG as an intensity slice whose id is the file stem.
pub fn read_png_slice(path: &Path) -> Result<CtSlice> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no usable file name", path.display())))?;
    Ok(CtSlice::new(read_png(path)?, PixelUnits::Intensity, stem, png_scan_id(stem)))
}

/// Writes a binary mask as an 8-bit PNG with values {0, 255}.
pub fn save_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let raw = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes probabilities in [0, 1] as an 8-bit PNG.
pub fn save_probability_png(probs: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = probs.dim();
    let raw = probs.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
