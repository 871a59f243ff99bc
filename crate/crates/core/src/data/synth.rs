use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CtSlice, MaskImage, PixelUnits, SamplePair};
use crate::error::{Error, Result};

const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.40;

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    contrast: f64,
}

impl Blob {
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Generates `count` square slices of side `size`, each holding one to three
/// soft elliptical blobs over textured noise. The mask is the blob support.
///
/// Sample `i` depends only on `(seed, i)`, so a shorter run is a prefix of a
/// longer one.
pub fn synth_blobs(count: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    if count == 0 {
        return Err(Error::InvalidArgument("synthetic sample count must be at least 1".into()));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("synthetic image size must be >= 16, got {size}")));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (pixels, mask) = generate(size, &mut rng);
            let id = format!("synth{i:04}");
            SamplePair::new(
                CtSlice::new(pixels, PixelUnits::Normalized, id.clone(), id),
                MaskImage::new(mask)?,
            )
        })
        .collect()
}

fn generate(size: usize, rng: &mut ChaCha8Rng) -> (Array2<f32>, Array2<u8>) {
    let s = size as f64;
    loop {
        let n_blobs = rng.random_range(1..=3);
        let blobs: Vec<Blob> = (0..n_blobs)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Blob {
                    cy: rng.random_range(0.2..0.8) * s,
                    cx: rng.random_range(0.2..0.8) * s,
                    a: (rng.random_range(0.08..0.22) * s).max(1.5),
                    b: (rng.random_range(0.08..0.22) * s).max(1.5),
                    cos: theta.cos(),
                    sin: theta.sin(),
                    contrast: rng.random_range(0.35..0.55),
                }
            })
            .collect();

        let mask = Array2::from_shape_fn((size, size), |(y, x)| {
            u8::from(blobs.iter().any(|b| b.radius(y as f64 + 0.5, x as f64 + 0.5) < 1.0))
        });
        let fraction = mask.iter().map(|&v| v as f64).sum::<f64>() / (s * s);
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
            continue;
        }

        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..4.0) / s,
                    rng.random_range(0.5..4.0) / s,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.02..0.05),
                )
            })
            .collect();
        let base = rng.random_range(0.15..0.3);
        let noise = Normal::new(0.0, 0.04).expect("valid std");
        let mut pixels = Array2::zeros((size, size));
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let texture: f64 = waves
                    .iter()
                    .map(|&(ky, kx, phase, amp)| amp * (std::f64::consts::TAU * (ky * fy + kx * fx) + phase).sin())
                    .sum();
                let lesion = blobs
                    .iter()
                    .map(|b| b.contrast * ((1.15 - b.radius(fy + 0.5, fx + 0.5)) / 0.3).clamp(0.0, 1.0))
                    .fold(0.0, f64::max);
                let v = base + texture + lesion + noise.sample(rng);
                pixels[[y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
        return (pixels, mask);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreground_fraction_within_contract() {
        for seed in 0..5 {
            for pair in synth_blobs(20, 16, seed).unwrap() {
                let f = pair.mask.foreground_fraction();
                assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "fraction {f}");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(synth_blobs(3, 32, 11).unwrap(), synth_blobs(3, 32, 11).unwrap());
        assert_ne!(synth_blobs(1, 32, 11).unwrap(), synth_blobs(1, 32, 12).unwrap());
    }

    #[test]
    fn shorter_run_is_a_prefix() {
        let long = synth_blobs(5, 16, 2).unwrap();
        let short = synth_blobs(2, 16, 2).unwrap();
        assert_eq!(&long[..2], &short[..]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_blobs(0, 32, 0).is_err());
        assert!(synth_blobs(1, 15, 0).is_err());
    }
}
