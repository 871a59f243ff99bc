use std::path::Path;

use hunet::data::{detect_layout, group_by_scan, load_dataset, synth_blobs, write_png_dataset, Layout, LoadOptions, PixelUnits};
use hunet::Error;
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::Array3;
use nifti::writer::WriterOptions;

fn save_gray(path: &Path, w: u32, h: u32, px: impl Fn(u32, u32) -> u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([px(x, y)])).save(path).unwrap();
}

#[test]
fn png_pairs_load_with_scan_ids_from_names() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for name in ["p01_000", "p01_001", "p02_000", "lone"] {
        save_gray(&root.join(format!("images/{name}.png")), 5, 3, |x, y| (x * 10 + y) as u8);
        save_gray(&root.join(format!("masks/{name}.png")), 5, 3, |x, _| if x < 2 { 255 } else { 0 });
    }
    assert_eq!(detect_layout(root).unwrap(), Layout::PngPairs);
    let samples = load_dataset(root, Layout::PngPairs, LoadOptions::default()).unwrap();
    assert_eq!(samples.len(), 4);
    let s = samples.iter().find(|s| s.id() == "p01_001").unwrap();
    assert_eq!(s.image.scan_id, "p01");
    assert_eq!(s.image.units, PixelUnits::Intensity);
    assert_eq!(s.image.dim(), (3, 5));
    assert_eq!(s.image.pixels[[2, 4]], 42.0);
    assert_eq!(s.mask.foreground(), 6);
    assert_eq!(group_by_scan(samples).len(), 3);
}

#[test]
fn missing_or_mismatched_masks_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    save_gray(&root.join("images/a.png"), 4, 4, |_, _| 0);
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let err = load_dataset(root, Layout::PngPairs, LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingMask(ref p) if p.ends_with("a.png")), "{err}");

    save_gray(&root.join("masks/a.png"), 4, 5, |_, _| 0);
    assert!(matches!(
        load_dataset(root, Layout::PngPairs, LoadOptions::default()),
        Err(Error::Shape { .. })
    ));

    let empty = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(empty.path().join("images")).unwrap();
    assert!(matches!(detect_layout(empty.path()), Err(Error::EmptyDataset(_))));
    assert!(load_dataset(&empty.path().join("nowhere"), Layout::PngPairs, LoadOptions::default()).is_err());
}

#[test]
fn sixteen_bit_round_trip_keeps_masks_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_blobs(5, 32, 11).unwrap();
    write_png_dataset(&samples, dir.path()).unwrap();
    let back = load_dataset(dir.path(), Layout::PngPairs, LoadOptions::default()).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id(), b.id());
        assert_eq!(a.mask, b.mask);
        for (&x, &y) in a.image.pixels.iter().zip(&b.image.pixels) {
            assert!((x.clamp(0.0, 1.0) * 65535.0 - y).abs() <= 0.5);
        }
    }
}

#[test]
fn sixteen_bit_pngs_keep_full_range() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("images")).unwrap();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(3, 1, |x, _| Luma([[0, 1000, 65535][x as usize]]));
    img.save(root.join("images/s.png")).unwrap();
    save_gray(&root.join("masks/s.png"), 3, 1, |_, _| 0);
    let s = &load_dataset(root, Layout::PngPairs, LoadOptions::default()).unwrap()[0];
    assert_eq!(s.image.pixels.as_slice().unwrap(), &[0.0, 1000.0, 65535.0]);
}

fn write_volume(path: &Path, vol: &Array3<f32>) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    WriterOptions::new(path).write_nifti(vol).unwrap();
}

#[test]
fn nifti_volumes_split_into_slices() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // (x, y, z) = (4, 3, 2)
    let vol = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| -1000.0 + (100 * x + 10 * y + z) as f32);
    let labels = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| if x == 0 { 2.0 } else if y == 0 && z == 1 { 1.0 } else { 0.0 });
    write_volume(&root.join("images/case7.nii.gz"), &vol);
    write_volume(&root.join("masks/case7.nii.gz"), &labels);
    write_volume(&root.join("images/case8.nii"), &vol);
    write_volume(&root.join("masks/case8.nii"), &labels);

    assert_eq!(detect_layout(root).unwrap(), Layout::Nifti);
    let samples = load_dataset(root, Layout::Nifti, LoadOptions::default()).unwrap();
    assert_eq!(samples.len(), 4);
    let s = samples.iter().find(|s| s.id() == "case7_0001").unwrap();
    assert_eq!(s.image.scan_id, "case7");
    assert_eq!(s.image.units, PixelUnits::Hounsfield);
    assert_eq!(s.image.dim(), (3, 4));
    assert_eq!(s.image.pixels[[2, 3]], -1000.0 + 321.0);
    assert_eq!(s.mask.foreground(), 3 + 3);

    let only_two = LoadOptions { label: Some(2) };
    let samples = load_dataset(root, Layout::Nifti, only_two).unwrap();
    assert!(samples.iter().all(|s| s.mask.foreground() == 3));
    assert_eq!(group_by_scan(samples).len(), 2);
}

#[test]
fn nifti_shape_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_volume(&root.join("images/a.nii"), &Array3::zeros((4, 4, 2)));
    write_volume(&root.join("masks/a.nii"), &Array3::zeros((4, 4, 3)));
    assert!(matches!(load_dataset(root, Layout::Nifti, LoadOptions::default()), Err(Error::Shape { .. })));
}
