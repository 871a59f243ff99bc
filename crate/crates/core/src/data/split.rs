use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SamplePair;
use crate::error::{Error, Result};

/// Train/test partition at scan granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
    pub train_scans: Vec<String>,
    pub test_scans: Vec<String>,
}

/// Groups slices by `scan_id`, keeping first-appearance order.
pub fn group_by_scan(samples: Vec<SamplePair>) -> Vec<Vec<SamplePair>> {
    let mut groups: Vec<Vec<SamplePair>> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for s in samples {
        let slot = *index.entry(s.image.scan_id.clone()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(s);
    }
    groups
}

/// Number of groups assigned to the held-out side.
pub(crate) fn held_out_count(groups: usize, fraction: f64) -> usize {
    // Tolerate products like 20 × 0.2 landing a hair above an integer.
    let raw = (groups as f64 * fraction - 1e-9).ceil() as usize;
    raw.clamp(1, groups - 1)
}

/// Shuffles scan groups with a seeded RNG and sends
/// `ceil(groups × test_fraction)` of them to the test side.
pub fn make_split(groups: Vec<Vec<SamplePair>>, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let groups: Vec<_> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 scans to split, got {}",
            groups.len()
        )));
    }
    let n_test = held_out_count(groups.len(), test_fraction);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; groups.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed,
        train_scans: Vec::new(),
        test_scans: Vec::new(),
    };
    for (group, test) in groups.into_iter().zip(is_test) {
        let scan = group[0].image.scan_id.clone();
        if test {
            split.test_scans.push(scan);
            split.test.extend(group);
        } else {
            split.train_scans.push(scan);
            split.train.extend(group);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CtSlice, MaskImage, PixelUnits};
    use ndarray::Array2;

    fn scans(n: usize, slices: usize) -> Vec<SamplePair> {
        (0..n)
            .flat_map(|s| {
                (0..slices).map(move |k| {
                    let img = CtSlice::new(Array2::zeros((2, 2)), PixelUnits::Normalized, format!("s{s}_{k}"), format!("s{s}"));
                    SamplePair::new(img, MaskImage::new(Array2::zeros((2, 2))).unwrap()).unwrap()
                })
            })
            .collect()
    }

    #[test]
    fn twenty_scans_hold_out_four() {
        let split = make_split(group_by_scan(scans(20, 3)), 0.2, 1).unwrap();
        assert_eq!(split.test_scans.len(), 4);
        assert_eq!(split.train_scans.len(), 16);
        assert_eq!(split.test.len(), 12);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_split(group_by_scan(scans(10, 2)), 0.3, 9).unwrap();
        let b = make_split(group_by_scan(scans(10, 2)), 0.3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn five_scans_always_one_four() {
        let mut memberships = std::collections::HashSet::new();
        for seed in 0..20 {
            let split = make_split(group_by_scan(scans(5, 1)), 0.2, seed).unwrap();
            assert_eq!((split.test_scans.len(), split.train_scans.len()), (1, 4));
            memberships.insert(split.test_scans.clone());
        }
        assert!(memberships.len() > 1);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(make_split(group_by_scan(scans(1, 4)), 0.2, 0).is_err());
        assert!(make_split(group_by_scan(scans(4, 1)), 0.0, 0).is_err());
        assert!(make_split(group_by_scan(scans(4, 1)), 1.0, 0).is_err());
    }

    #[test]
    fn never_splits_a_scan() {
        let split = make_split(group_by_scan(scans(7, 4)), 0.4, 3).unwrap();
        for t in &split.test {
            assert!(split.train.iter().all(|s| s.image.scan_id != t.image.scan_id));
        }
    }
}
