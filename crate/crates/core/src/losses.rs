//! Pixel and region losses on probability maps, and their weighted composite.
//!
//! All maps are `(batch, height, width)` arrays of probabilities, binary
//! targets, or signed distances. Every component has a `*_with_grad`
//! companion returning the analytic gradient with respect to the
//! probabilities.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::check_dims;
use crate::scalar::Scalar;

/// Probability clamp used inside the cross-entropy term only.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BceWeighting {
    /// Each class weighted by the other class's pixel fraction in the batch.
    HedClassBalance,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dice_smooth: f64,
    pub bce_weighting: BceWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            dice_smooth: 1.0,
            bce_weighting: BceWeighting::HedClassBalance,
        }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha + beta must equal 1 (got {} + {} = {})",
                self.alpha,
                self.beta,
                self.alpha + self.beta
            )));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be positive, got {}", self.dice_smooth)));
        }
        Ok(())
    }

    /// Per-component weights of the Bi-H composite: (α, α, β, β).
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            wbce: self.alpha,
            dice: self.alpha,
            hinge: self.beta,
            boundary: self.beta,
        }
    }
}

/// Independent weights on the four components; used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub wbce: f64,
    pub dice: f64,
    pub hinge: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossComponent {
    WeightedBce,
    Dice,
    SquaredHinge,
    Boundary,
}

impl LossComponent {
    pub const ALL: [LossComponent; 4] = [Self::WeightedBce, Self::Dice, Self::SquaredHinge, Self::Boundary];

    pub fn name(self) -> &'static str {
        match self {
            Self::WeightedBce => "wbce",
            Self::Dice => "dice",
            Self::SquaredHinge => "hinge",
            Self::Boundary => "boundary",
        }
    }
}

impl std::str::FromStr for LossComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

/// Component values before weighting, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub wbce: T,
    pub dice: T,
    pub hinge: T,
    pub boundary: T,
    pub total: T,
}

fn same_shape<T>(context: &'static str, a: &ArrayView3<'_, T>, b: &ArrayView3<'_, T>) -> Result<()> {
    check_dims(context, a.shape(), b.shape())
}

fn class_weights<T: Scalar>(target: &ArrayView3<'_, T>, mode: BceWeighting) -> (T, T) {
    match mode {
        BceWeighting::Uniform => (T::one(), T::one()),
        BceWeighting::HedClassBalance => {
            let n = target.len();
            let pos = target.iter().filter(|&&y| y > T::of(0.5)).count();
            if pos == 0 || pos == n {
                (T::one(), T::one())
            } else {
                let nf = T::of(n as f64);
                (T::of((n - pos) as f64) / nf, T::of(pos as f64) / nf)
            }
        }
    }
}

/// Class-weighted binary cross-entropy, averaged over all pixels.
pub fn weighted_bce<T: Scalar>(pred: ArrayView3<'_, T>, target: ArrayView3<'_, T>, mode: BceWeighting) -> Result<T> {
    weighted_bce_impl(pred, target, mode, false).map(|(v, _)| v)
}

pub fn weighted_bce_with_grad<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    mode: BceWeighting,
) -> Result<(T, Array3<T>)> {
    weighted_bce_impl(pred, target, mode, true).map(|(v, g)| (v, g.expect("requested")))
}

fn weighted_bce_impl<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    mode: BceWeighting,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    same_shape("weighted_bce", &pred, &target)?;
    let (w_pos, w_neg) = class_weights(&target, mode);
    let eps = T::of(BCE_EPS);
    let hi = T::one() - eps;
    let m = T::of(pred.len() as f64);
    let mut sum = T::zero();
    Zip::from(&pred).and(&target).for_each(|&p, &y| {
        let pc = if p < eps { eps } else if p > hi { hi } else { p };
        sum += w_pos * y * pc.ln() + w_neg * (T::one() - y) * (T::one() - pc).ln();
    });
    let grad = want_grad.then(|| {
        Zip::from(&pred).and(&target).map_collect(|&p, &y| {
            if p < eps || p > hi {
                T::zero()
            } else {
                -(w_pos * y / p - w_neg * (T::one() - y) / (T::one() - p)) / m
            }
        })
    });
    Ok((-sum / m, grad))
}

/// Soft Dice loss per sample, averaged over the batch.
pub fn dice_loss<T: Scalar>(pred: ArrayView3<'_, T>, target: ArrayView3<'_, T>, smooth: T) -> Result<T> {
    dice_impl(pred, target, smooth, false).map(|(v, _)| v)
}

pub fn dice_loss_with_grad<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    smooth: T,
) -> Result<(T, Array3<T>)> {
    dice_impl(pred, target, smooth, true).map(|(v, g)| (v, g.expect("requested")))
}

fn dice_impl<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    smooth: T,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    same_shape("dice_loss", &pred, &target)?;
    if !(smooth > T::zero()) {
        return Err(Error::InvalidArgument("dice smoothing must be positive".into()));
    }
    let batch = pred.shape()[0];
    let nb = T::of(batch as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Array3::zeros(pred.raw_dim()));
    for s in 0..batch {
        let (p, y) = (pred.index_axis(ndarray::Axis(0), s), target.index_axis(ndarray::Axis(0), s));
        let inter: T = Zip::from(&p).and(&y).fold(T::zero(), |acc, &a, &b| acc + a * b);
        let denom = p.sum() + y.sum() + smooth;
        let numer = T::of(2.0) * inter + smooth;
        total += T::one() - numer / denom;
        if let Some(g) = grad.as_mut() {
            let d2 = denom * denom;
            Zip::from(g.index_axis_mut(ndarray::Axis(0), s))
                .and(&y)
                .for_each(|gv, &yv| *gv = -(T::of(2.0) * yv * denom - numer) / d2 / nb);
        }
    }
    Ok((total / nb, grad))
}

/// Squared hinge on scores `2p − 1` against labels `2y − 1`.
pub fn squared_hinge<T: Scalar>(pred: ArrayView3<'_, T>, target: ArrayView3<'_, T>) -> Result<T> {
    hinge_impl(pred, target, false).map(|(v, _)| v)
}

pub fn squared_hinge_with_grad<T: Scalar>(pred: ArrayView3<'_, T>, target: ArrayView3<'_, T>) -> Result<(T, Array3<T>)> {
    hinge_impl(pred, target, true).map(|(v, g)| (v, g.expect("requested")))
}

fn hinge_impl<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    same_shape("squared_hinge", &pred, &target)?;
    let two = T::of(2.0);
    let m = T::of(pred.len() as f64);
    let margin = |p: T, y: T| {
        let t = two * y - T::one();
        let h = T::one() - t * (two * p - T::one());
        (if h < T::zero() { T::zero() } else { h }, t)
    };
    let sum = Zip::from(&pred).and(&target).fold(T::zero(), |acc, &p, &y| {
        let (h, _) = margin(p, y);
        acc + h * h
    });
    let grad = want_grad.then(|| {
        Zip::from(&pred).and(&target).map_collect(|&p, &y| {
            let (h, t) = margin(p, y);
            -T::of(4.0) * t * h / m
        })
    });
    Ok((sum / m, grad))
}

/// Mean of `p · phi` over all pixels; negative when mass sits inside the target.
pub fn boundary_loss<T: Scalar>(pred: ArrayView3<'_, T>, sdm: ArrayView3<'_, T>) -> Result<T> {
    boundary_impl(pred, sdm, false).map(|(v, _)| v)
}

pub fn boundary_loss_with_grad<T: Scalar>(pred: ArrayView3<'_, T>, sdm: ArrayView3<'_, T>) -> Result<(T, Array3<T>)> {
    boundary_impl(pred, sdm, true).map(|(v, g)| (v, g.expect("requested")))
}

fn boundary_impl<T: Scalar>(
    pred: ArrayView3<'_, T>,
    sdm: ArrayView3<'_, T>,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    same_shape("boundary_loss", &pred, &sdm)?;
    let m = T::of(pred.len() as f64);
    let sum = Zip::from(&pred).and(&sdm).fold(T::zero(), |acc, &p, &phi| acc + p * phi);
    let grad = want_grad.then(|| sdm.mapv(|phi| phi / m));
    Ok((sum / m, grad))
}

/// Bi-category hybrid loss: `α·(wbce + dice) + β·(hinge + boundary)`.
pub fn bi_h_loss<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    sdm: ArrayView3<'_, T>,
    config: &LossConfig,
) -> Result<(T, LossBreakdown<T>)> {
    config.validate()?;
    let b = components(pred, target, sdm, config)?;
    let (alpha, beta) = (T::of(config.alpha), T::of(config.beta));
    let total = alpha * (b.wbce + b.dice) + beta * (b.hinge + b.boundary);
    Ok((total, LossBreakdown { total, ..b }))
}

pub fn bi_h_loss_with_grad<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    sdm: ArrayView3<'_, T>,
    config: &LossConfig,
) -> Result<(LossBreakdown<T>, Array3<T>)> {
    config.validate()?;
    weighted_composite_with_grad(pred, target, sdm, &config.weights(), config)
}

fn components<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    sdm: ArrayView3<'_, T>,
    config: &LossConfig,
) -> Result<LossBreakdown<T>> {
    Ok(LossBreakdown {
        wbce: weighted_bce(pred, target, config.bce_weighting)?,
        dice: dice_loss(pred, target, T::of(config.dice_smooth))?,
        hinge: squared_hinge(pred, target)?,
        boundary: boundary_loss(pred, sdm)?,
        total: T::zero(),
    })
}

/// Arbitrary non-negative combination of the four components, with gradient.
///
/// The breakdown always reports every component, including zero-weighted ones.
pub fn weighted_composite_with_grad<T: Scalar>(
    pred: ArrayView3<'_, T>,
    target: ArrayView3<'_, T>,
    sdm: ArrayView3<'_, T>,
    weights: &LossWeights,
    config: &LossConfig,
) -> Result<(LossBreakdown<T>, Array3<T>)> {
    let (wbce, g_wbce) = weighted_bce_with_grad(pred, target, config.bce_weighting)?;
    let (dice, g_dice) = dice_loss_with_grad(pred, target, T::of(config.dice_smooth))?;
    let (hinge, g_hinge) = squared_hinge_with_grad(pred, target)?;
    let (boundary, g_boundary) = boundary_loss_with_grad(pred, sdm)?;

    let (a, b, c, d) = (
        T::of(weights.wbce),
        T::of(weights.dice),
        T::of(weights.hinge),
        T::of(weights.boundary),
    );
    let total = if weights.wbce == weights.dice && weights.hinge == weights.boundary {
        a * (wbce + dice) + c * (hinge + boundary)
    } else {
        a * wbce + b * dice + c * hinge + d * boundary
    };
    let mut grad = g_wbce;
    Zip::from(&mut grad)
        .and(&g_dice)
        .and(&g_hinge)
        .and(&g_boundary)
        .for_each(|g, &gd, &gh, &gb| *g = a * *g + b * gd + c * gh + d * gb);
    Ok((
        LossBreakdown {
            wbce,
            dice,
            hinge,
            boundary,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn map(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn wbce_half_positive_at_one_half() {
        let (p, y) = (map(&[0.5; 4]), map(&[0.0, 0.0, 1.0, 1.0]));
        let v = weighted_bce(p.view(), y.view(), BceWeighting::HedClassBalance).unwrap();
        assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let u = weighted_bce(p.view(), y.view(), BceWeighting::Uniform).unwrap();
        assert!((u - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wbce_perfect_prediction_is_near_zero() {
        let y = map(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let v = weighted_bce(y.view(), y.view(), BceWeighting::HedClassBalance).unwrap();
        assert!(v >= 0.0 && v <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn dice_hand_values() {
        let (ones, zeros) = (map(&[1.0; 16]), map(&[0.0; 16]));
        let v = dice_loss(ones.view(), zeros.view(), 1.0).unwrap();
        assert!((v - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
        let v = dice_loss(map(&[0.5; 4]).view(), map(&[1.0; 4]).view(), 1.0).unwrap();
        assert!((v - (1.0 - 5.0 / 7.0)).abs() < 1e-12);
        let y = map(&[1.0, 0.0, 1.0]);
        assert_eq!(dice_loss(y.view(), y.view(), 0.3).unwrap(), 0.0);
    }

    #[test]
    fn hinge_hand_values() {
        let ones = map(&[1.0; 3]);
        assert_eq!(squared_hinge(ones.view(), ones.view()).unwrap(), 0.0);
        assert_eq!(squared_hinge(map(&[0.5; 3]).view(), map(&[0.0, 1.0, 0.0]).view()).unwrap(), 1.0);
        assert_eq!(squared_hinge(map(&[0.0; 3]).view(), ones.view()).unwrap(), 4.0);
    }

    #[test]
    fn boundary_hand_values() {
        let phi = map(&[1.0, -1.0, 1.0]);
        assert_eq!(boundary_loss(map(&[0.0; 3]).view(), phi.view()).unwrap(), 0.0);
        assert!((boundary_loss(map(&[1.0; 3]).view(), phi.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((boundary_loss(map(&[0.0, 1.0, 0.0]).view(), phi.view()).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn composite_worked_example() {
        let cfg = LossConfig::new(0.5, 0.5).unwrap();
        let (p, y, phi) = (map(&[0.5; 4]), map(&[0.0, 0.0, 1.0, 1.0]), map(&[2.0, 1.0, -1.0, -1.0]));
        let (total, b) = bi_h_loss(p.view(), y.view(), phi.view(), &cfg).unwrap();
        let expected = 0.5 * (0.5 * std::f64::consts::LN_2 + 0.4) + 0.5 * (1.0 + 0.125);
        assert!((total - expected).abs() < 1e-12);
        assert!((total - 0.93579).abs() < 1e-5);
        assert!((b.dice - 0.4).abs() < 1e-12);
        assert_eq!(b.boundary, 0.125);
    }

    #[test]
    fn config_enforces_unit_sum() {
        let err = LossConfig::new(0.7, 0.4).unwrap_err();
        assert!(err.to_string().contains("alpha + beta must equal 1"));
        assert!(LossConfig::new(1.0, 0.0).is_ok());
        assert!(LossConfig::new(1.2, -0.2).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (a, b) = (map(&[0.5; 3]), map(&[0.5; 4]));
        assert!(weighted_bce(a.view(), b.view(), BceWeighting::Uniform).is_err());
        assert!(dice_loss(a.view(), b.view(), 1.0).is_err());
        assert!(squared_hinge(a.view(), b.view()).is_err());
        assert!(boundary_loss(a.view(), b.view()).is_err());
    }

    #[test]
    fn dice_averages_per_sample() {
        let p: Array3<f64> = array![[[1.0, 0.0]], [[0.0, 0.0]]];
        let y = array![[[1.0, 0.0]], [[1.0, 0.0]]];
        let v = dice_loss(p.view(), y.view(), 1.0).unwrap();
        let expected = ((1.0 - 3.0 / 3.0) + (1.0 - 1.0 / 2.0)) / 2.0;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn component_names_round_trip() {
        for c in LossComponent::ALL {
            assert_eq!(c.name().parse::<LossComponent>().unwrap(), c);
        }
        assert!("tv".parse::<LossComponent>().is_err());
    }
}
