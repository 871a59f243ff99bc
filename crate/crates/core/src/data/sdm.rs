use ndarray::Array2;

use super::{MaskImage, SignedDistanceMap};

const FAR: i64 = i64::MAX / 4;

/// Exact signed Euclidean distance transform of a binary mask.
///
/// Background pixels get the distance to the nearest foreground pixel,
/// foreground pixels minus the distance to the nearest background pixel.
pub fn signed_distance_map(mask: &MaskImage) -> SignedDistanceMap {
    let px = mask.pixels();
    let (h, w) = px.dim();
    let fg = mask.foreground();
    if fg == 0 || fg == h * w {
        return SignedDistanceMap { phi: Array2::zeros((h, w)) };
    }
    let to_fg = squared_edt(px, 1);
    let to_bg = squared_edt(px, 0);
    let phi = Array2::from_shape_fn((h, w), |(y, x)| {
        if px[[y, x]] == 1 {
            -((to_bg[[y, x]] as f64).sqrt() as f32)
        } else {
            (to_fg[[y, x]] as f64).sqrt() as f32
        }
    });
    SignedDistanceMap { phi }
}

/// Squared distance from every pixel to the nearest pixel whose value is `site`.
///
/// Separable lower-envelope-of-parabolas transform, columns then rows.
fn squared_edt(px: &Array2<u8>, site: u8) -> Array2<i64> {
    let (h, w) = px.dim();
    let mut grid = px.mapv(|v| if v == site { 0 } else { FAR });
    let n = h.max(w);
    let (mut f, mut d) = (vec![0i64; n], vec![0i64; n]);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];

    for x in 0..w {
        for y in 0..h {
            f[y] = grid[[y, x]];
        }
        envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[[y, x]] = d[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = grid[[y, x]];
        }
        envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        for x in 0..w {
            grid[[y, x]] = d[x];
        }
    }
    grid
}

fn envelope(f: &[i64], d: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] >= FAR {
            continue;
        }
        let fq = (f[q] + (q * q) as i64) as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let fp = (f[p] + (p * p) as i64) as f64;
            let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        d.fill(FAR);
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as i64 - p as i64;
        d[q] = dq * dq + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sdm(m: Array2<u8>) -> Array2<f32> {
        signed_distance_map(&MaskImage::new(m).unwrap()).phi
    }

    #[test]
    fn hand_computed_rows() {
        assert_eq!(sdm(array![[0, 1, 0]]), array![[1.0, -1.0, 1.0]]);
        assert_eq!(sdm(array![[0, 0, 1, 1, 0]]), array![[2.0, 1.0, -1.0, -1.0, 1.0]]);
    }

    #[test]
    fn degenerate_masks_are_zero() {
        assert!(sdm(Array2::zeros((4, 4))).iter().all(|&v| v == 0.0));
        assert!(sdm(Array2::ones((3, 2))).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_distance_is_euclidean() {
        let mut m = Array2::zeros((4, 4));
        m[[0, 0]] = 1;
        let phi = sdm(m);
        assert_eq!(phi[[3, 3]], (18f64).sqrt() as f32);
        assert_eq!(phi[[0, 0]], -1.0);
    }
}
