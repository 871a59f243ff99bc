//! Brute-force reference implementations and the self-check suites built on them.
//!
//! Nothing here calls into the code paths it verifies: metrics are counted
//! with explicit pixel loops, distance maps by exhaustive search, losses by
//! scalar arithmetic, and gradients by central differences.

use ndarray::{Array, Array2, Array3, Array4, ArrayView3, Dimension, IntoDimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{signed_distance_map, MaskImage};
use crate::error::{Error, Result};
use crate::losses::{
    bi_h_loss, bi_h_loss_with_grad, boundary_loss_with_grad, dice_loss, dice_loss_with_grad, squared_hinge,
    squared_hinge_with_grad, weighted_bce, weighted_bce_with_grad, boundary_loss, BceWeighting, LossComponent,
    LossConfig,
};
use crate::metrics::{confusion, dice_coefficient, sensitivity, specificity};
use crate::model::{AttentionGate, AttentionUNet, ModelConfig, NormKind};
use crate::nn::{FeatureMap, Mode, Module, TensorMut};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;
/// Maximum relative gradient error tolerated by the loss checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Absolute agreement required between a loss and its scalar oracle.
pub const ORACLE_TOL: f64 = 1e-10;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<D, F>(mut f: F, x: &Array<f64, D>, step: f64) -> Result<Array<f64, D>>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.as_standard_layout().into_owned();
    let mut grad = Array::zeros(x.raw_dim());
    let len = probe.len();
    for i in 0..len {
        let orig = probe.as_slice().expect("standard layout")[i];
        let (hi, lo) = (orig + step, orig - step);
        probe.as_slice_mut().expect("standard layout")[i] = hi;
        let up = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = lo;
        let down = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            let (idx, _) = probe.indexed_iter().nth(i).expect("in range");
            return Err(Error::NonFinite {
                index: idx.into_dimension().slice().to_vec(),
            });
        }
        // Divide by the displacement actually representable around `orig`.
        grad.as_slice_mut().expect("fresh array")[i] = (up - down) / (hi - lo);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub grid_shape: Vec<usize>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn compare<D: Dimension>(
        component: impl Into<String>,
        analytic: &Array<f64, D>,
        numeric: &Array<f64, D>,
        step: f64,
    ) -> Self {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic.iter().zip(numeric.iter()) {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(REL_FLOOR));
        }
        Self {
            component: component.into(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            grid_shape: analytic.shape().to_vec(),
            step,
        }
    }

    /// Keeps the worse of two reports for the same component.
    pub fn merge(mut self, other: &Self) -> Self {
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self
    }
}

/// Dice, sensitivity and specificity by explicit pixel loops.
pub fn brute_force_metrics(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<(f64, f64, f64)> {
    if pred.dim() != gt.dim() {
        let (a, b) = (gt.dim(), pred.dim());
        return Err(Error::shape("brute_force_metrics", &[a.0, a.1], &[b.0, b.1]));
    }
    let (h, w) = pred.dim();
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (p, g) = (pred[[y, x]], gt[[y, x]]);
            if p > 1 || g > 1 {
                return Err(Error::NonBinary("brute_force_metrics"));
            }
            if p == 1 && g == 1 {
                tp += 1;
            } else if p == 1 {
                fp += 1;
            } else if g == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((ratio(2 * tp, 2 * tp + fp + fn_), ratio(tp, tp + fn_), ratio(tn, tn + fp)))
}

/// Signed distance map by exhaustive nearest-opposite-pixel search.
pub fn brute_force_sdm(mask: &Array2<u8>) -> Array2<f32> {
    let (h, w) = mask.dim();
    let fg = mask.iter().filter(|&&v| v == 1).count();
    if fg == 0 || fg == h * w {
        return Array2::zeros((h, w));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let me = mask[[y, x]];
            let mut best = i64::MAX;
            for yy in 0..h {
                for xx in 0..w {
                    if mask[[yy, xx]] != me {
                        let (dy, dx) = (yy as i64 - y as i64, xx as i64 - x as i64);
                        best = best.min(dy * dy + dx * dx);
                    }
                }
            }
            let d = (best as f64).sqrt() as f32;
            out[[y, x]] = if me == 1 { -d } else { d };
        }
    }
    out
}

/// Parameters for [`tiny_loss_oracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    pub smooth: f64,
    pub weighting: BceWeighting,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            smooth: 1.0,
            weighting: BceWeighting::HedClassBalance,
        }
    }
}

/// Evaluates one loss component on a single small grid with scalar loops.
///
/// `aux` is the binary target for `wbce`, `dice` and `hinge`, and the signed
/// distance map for `boundary`.
pub fn tiny_loss_oracle(component: &str, pred: &Array2<f64>, aux: &Array2<f64>, params: OracleParams) -> Result<f64> {
    let component: LossComponent = component.parse()?;
    let (h, w) = pred.dim();
    if h > 8 || w > 8 {
        return Err(Error::InvalidArgument(format!("oracle grids are limited to 8x8, got {h}x{w}")));
    }
    if aux.dim() != (h, w) {
        let d = aux.dim();
        return Err(Error::shape("tiny_loss_oracle", &[h, w], &[d.0, d.1]));
    }
    let n = (h * w) as f64;
    let mut value = 0.0;
    match component {
        LossComponent::WeightedBce => {
            let mut positives = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if aux[[y, x]] == 1.0 {
                        positives += 1;
                    }
                }
            }
            let (wp, wn) = match params.weighting {
                BceWeighting::HedClassBalance if positives > 0 && positives < h * w => {
                    ((h * w - positives) as f64 / n, positives as f64 / n)
                }
                _ => (1.0, 1.0),
            };
            let eps = crate::losses::BCE_EPS;
            for y in 0..h {
                for x in 0..w {
                    let p = pred[[y, x]].max(eps).min(1.0 - eps);
                    let t = aux[[y, x]];
                    value -= wp * t * p.ln() + wn * (1.0 - t) * (1.0 - p).ln();
                }
            }
            value /= n;
        }
        LossComponent::Dice => {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    inter += pred[[y, x]] * aux[[y, x]];
                    sp += pred[[y, x]];
                    st += aux[[y, x]];
                }
            }
            value = 1.0 - (2.0 * inter + params.smooth) / (sp + st + params.smooth);
        }
        LossComponent::SquaredHinge => {
            for y in 0..h {
                for x in 0..w {
                    let score = 2.0 * pred[[y, x]] - 1.0;
                    let label = 2.0 * aux[[y, x]] - 1.0;
                    let m = 1.0 - label * score;
                    if m > 0.0 {
                        value += m * m;
                    }
                }
            }
            value /= n;
        }
        LossComponent::Boundary => {
            for y in 0..h {
                for x in 0..w {
                    value += pred[[y, x]] * aux[[y, x]];
                }
            }
            value /= n;
        }
    }
    Ok(value)
}

/// Outcome of one named self-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckScope {
    Losses,
    Metrics,
    Gates,
    Distance,
    All,
}

/// Deliberate defects used to confirm that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the analytic gradient of the boundary loss.
    FlipBoundaryGradient,
}

pub fn run_checks(scope: CheckScope, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if matches!(scope, CheckScope::Losses | CheckScope::All) {
        out.extend(check_loss_gradients(20, seed, fault)?);
        out.extend(check_loss_oracles(50, seed)?);
        out.extend(check_composite_reductions(seed)?);
    }
    if matches!(scope, CheckScope::Metrics | CheckScope::All) {
        out.push(check_metrics(200, seed)?);
    }
    if matches!(scope, CheckScope::Distance | CheckScope::All) {
        out.push(check_distance_maps(100, seed));
    }
    if matches!(scope, CheckScope::Gates | CheckScope::All) {
        out.extend(check_gates(100, seed)?);
        for norm in [NormKind::None, NormKind::Batch] {
            let report = network_grad_check(norm, seed)?;
            out.push(CheckOutcome::new(
                format!("network gradient ({})", if norm == NormKind::Batch { "batch norm" } else { "no norm" }),
                report.max_rel_error < 1e-4,
                report.max_rel_error,
                1e-4,
                format!("max abs error {:.3e}", report.max_abs_error),
            ));
        }
    }
    Ok(out)
}

/// Random loss instance: probabilities away from 0/1, a binary target with
/// both classes, and its distance map.
pub fn random_loss_instance<R: Rng>(rng: &mut R, h: usize, w: usize) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let pred = Array3::from_shape_simple_fn((1, h, w), || rng.random_range(0.05..0.95));
    let mask = loop {
        let m = Array2::from_shape_simple_fn((h, w), || u8::from(rng.random_bool(0.4)));
        let fg = m.iter().filter(|&&v| v == 1).count();
        if h * w == 1 || (fg > 0 && fg < h * w) {
            break m;
        }
    };
    let phi = signed_distance_map(&MaskImage::new(mask.clone()).expect("binary"))
        .phi
        .mapv(f64::from)
        .insert_axis(ndarray::Axis(0));
    (pred, mask.mapv(f64::from).insert_axis(ndarray::Axis(0)), phi)
}

type GradFn = Box<dyn Fn(ArrayView3<'_, f64>, ArrayView3<'_, f64>, ArrayView3<'_, f64>) -> Result<(f64, Array3<f64>)>>;

fn gradient_cases(fault: Option<Fault>) -> Vec<(&'static str, GradFn)> {
    let flip = fault == Some(Fault::FlipBoundaryGradient);
    vec![
        ("wbce (hed-class-balance)", Box::new(|p, t, _| weighted_bce_with_grad(p, t, BceWeighting::HedClassBalance))),
        ("wbce (uniform)", Box::new(|p, t, _| weighted_bce_with_grad(p, t, BceWeighting::Uniform))),
        ("dice", Box::new(|p, t, _| dice_loss_with_grad(p, t, 1.0))),
        ("squared hinge", Box::new(|p, t, _| squared_hinge_with_grad(p, t))),
        (
            "boundary",
            Box::new(move |p, _, s| {
                let (v, g) = boundary_loss_with_grad(p, s)?;
                Ok((v, if flip { -g } else { g }))
            }),
        ),
        (
            "bi-h (alpha = 0.5)",
            Box::new(|p, t, s| {
                let (b, g) = bi_h_loss_with_grad(p, t, s, &LossConfig::default())?;
                Ok((b.total, g))
            }),
        ),
    ]
}

/// Analytic vs central-difference gradients on random 8×8 instances.
pub fn check_loss_gradients(instances: usize, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, f) in gradient_cases(fault) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..instances {
            let (p, t, s) = random_loss_instance(&mut rng, 8, 8);
            let (_, analytic) = f(p.view(), t.view(), s.view())?;
            let numeric = finite_diff_grad(
                |x| f(x.view(), t.view(), s.view()).map(|(v, _)| v).unwrap_or(f64::NAN),
                &p,
                FD_STEP,
            )?;
            let r = GradCheckReport::compare(name, &analytic, &numeric, FD_STEP);
            worst = Some(match worst {
                Some(w) => w.merge(&r),
                None => r,
            });
        }
        let w = worst.expect("at least one instance");
        out.push(CheckOutcome::new(
            format!("gradient: {name}"),
            w.max_rel_error < GRAD_TOL,
            w.max_rel_error,
            GRAD_TOL,
            format!("{instances} instances 8x8, step {FD_STEP:e}, max abs error {:.3e}", w.max_abs_error),
        ));
    }
    Ok(out)
}

/// Every component vs the scalar oracle on random grids up to 8×8.
pub fn check_loss_oracles(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0AC1E);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (p, t, s) = random_loss_instance(&mut rng, h, w);
        let (p2, t2, s2) = (p.index_axis(ndarray::Axis(0), 0).to_owned(), t.index_axis(ndarray::Axis(0), 0).to_owned(), s.index_axis(ndarray::Axis(0), 0).to_owned());
        let smooth = rng.random_range(0.1..2.0);
        let hed = OracleParams { smooth, weighting: BceWeighting::HedClassBalance };
        let uni = OracleParams { smooth, weighting: BceWeighting::Uniform };
        let pairs = [
            (weighted_bce(p.view(), t.view(), BceWeighting::HedClassBalance)?, tiny_loss_oracle("wbce", &p2, &t2, hed)?),
            (weighted_bce(p.view(), t.view(), BceWeighting::Uniform)?, tiny_loss_oracle("wbce", &p2, &t2, uni)?),
            (dice_loss(p.view(), t.view(), smooth)?, tiny_loss_oracle("dice", &p2, &t2, hed)?),
            (squared_hinge(p.view(), t.view())?, tiny_loss_oracle("hinge", &p2, &t2, hed)?),
            (boundary_loss(p.view(), s.view())?, tiny_loss_oracle("boundary", &p2, &s2, hed)?),
        ];
        for (slot, (a, b)) in worst.iter_mut().zip(pairs) {
            *slot = slot.max((a - b).abs());
        }
    }
    let names = ["wbce (hed)", "wbce (uniform)", "dice", "hinge", "boundary"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| {
            CheckOutcome::new(
                format!("oracle: {n}"),
                e <= ORACLE_TOL,
                e,
                ORACLE_TOL,
                format!("{instances} random grids up to 8x8"),
            )
        })
        .collect())
}

/// α ∈ {0, ½, 1} reductions and affinity of the composite in α.
pub fn check_composite_reductions(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let (mut exact_ok, mut affine_err) = (true, 0.0f64);
    for _ in 0..20 {
        let (p, t, s) = random_loss_instance(&mut rng, 8, 8);
        let at = |alpha: f64| -> Result<(f64, crate::losses::LossBreakdown<f64>)> {
            let cfg = LossConfig { alpha, beta: 1.0 - alpha, ..LossConfig::default() };
            bi_h_loss(p.view(), t.view(), s.view(), &cfg)
        };
        let (l1, b1) = at(1.0)?;
        let (l0, b0) = at(0.0)?;
        let (lh, _) = at(0.5)?;
        exact_ok &= l1 == b1.wbce + b1.dice && l0 == b0.hinge + b0.boundary;
        affine_err = affine_err.max((lh - 0.5 * (l0 + l1)).abs());
    }
    Ok(vec![
        CheckOutcome::new("composite: alpha=1 / alpha=0 reductions", exact_ok, 0.0, 0.0, "bit-exact"),
        CheckOutcome::new("composite: affine in alpha", affine_err <= 1e-9, affine_err, 1e-9, "alpha in {0, 0.5, 1}"),
    ])
}

/// Metrics vs pixel-loop counting on random 16×16 pairs plus degenerate cases.
pub fn check_metrics(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3E7);
    let mut mismatches = 0usize;
    let mut pairs: Vec<(Array2<u8>, Array2<u8>)> = vec![
        (Array2::zeros((16, 16)), Array2::zeros((16, 16))),
        (Array2::ones((16, 16)), Array2::zeros((16, 16))),
        (Array2::zeros((16, 16)), Array2::ones((16, 16))),
        (Array2::ones((16, 16)), Array2::ones((16, 16))),
    ];
    for _ in 0..instances {
        let density = rng.random_range(0.0..1.0);
        let mut m = || Array2::from_shape_simple_fn((16, 16), || u8::from(rng.random_bool(density)));
        pairs.push((m(), m()));
    }
    for (pred, gt) in &pairs {
        let c = confusion(pred.view(), gt.view())?;
        let fast = (dice_coefficient(&c), sensitivity(&c), specificity(&c));
        if fast != brute_force_metrics(pred, gt)? {
            mismatches += 1;
        }
    }
    Ok(CheckOutcome::new(
        "metrics: confusion-based vs pixel loops",
        mismatches == 0,
        mismatches as f64,
        0.0,
        format!("{} mask pairs, exact equality", pairs.len()),
    ))
}

pub fn check_distance_maps(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5D);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let density = rng.random_range(0.05..0.95);
        let mask = Array2::from_shape_simple_fn((h, w), || u8::from(rng.random_bool(density)));
        let fast = signed_distance_map(&MaskImage::new(mask.clone()).expect("binary")).phi;
        if fast != brute_force_sdm(&mask) {
            mismatches += 1;
        }
    }
    CheckOutcome::new(
        "distance map: transform vs exhaustive search",
        mismatches == 0,
        mismatches as f64,
        0.0,
        format!("{instances} random masks up to 16x16, exact equality"),
    )
}

fn randomize<M: Module<f64>>(module: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    module.visit_mut("", &mut |_, t| {
        if let TensorMut::Param(p) = t {
            p.value.mapv_inplace(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
        }
    });
}

/// Coefficient range, zero-parameter behaviour, shape preservation, gate count.
pub fn check_gates(draws: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A7E);
    let (mut in_range, mut shapes_ok) = (true, true);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    let mut zero_err = 0.0f64;
    for i in 0..draws {
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(2..=8), rng.random_range(2..=8));
        let (cs, cg) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let batch_norm = i % 2 == 0;
        let mut gate = AttentionGate::<f64>::new(cs, cg, batch_norm, &mut rng);
        randomize(&mut gate, &mut rng, 0.5);
        let skip = Array4::from_shape_simple_fn((n, h, w, cs), || StandardNormal.sample(&mut rng));
        let signal = Array4::from_shape_simple_fn((n, h, w, cg), || StandardNormal.sample(&mut rng));
        let out = gate.forward(&skip, &signal, Mode::Train)?;
        shapes_ok &= out.dim() == skip.dim();
        let a = gate.coefficients().expect("forward ran");
        shapes_ok &= a.dim() == (n, h, w, 1);
        for &v in a {
            in_range &= v > 0.0 && v < 1.0;
            lo = lo.min(v);
            hi = hi.max(v);
        }

        randomize(&mut gate, &mut rng, 0.0);
        let out = gate.forward(&skip, &signal, Mode::Train)?;
        for (o, s) in out.iter().zip(skip.iter()) {
            zero_err = zero_err.max((o - 0.5 * s).abs());
        }
    }
    let model = AttentionUNet::<f32>::new(ModelConfig::default(), seed)?;
    let gates = model.num_attention_gates();
    Ok(vec![
        CheckOutcome::new(
            "gates: coefficients in (0, 1)",
            in_range,
            hi,
            1.0,
            format!("{draws} random draws, observed range [{lo:.3e}, {hi:.6}]"),
        ),
        CheckOutcome::new("gates: zero parameters give 0.5 x skip", zero_err <= 1e-6, zero_err, 1e-6, "max abs deviation"),
        CheckOutcome::new("gates: output shape equals skip shape", shapes_ok, 0.0, 0.0, ""),
        CheckOutcome::new("gates: default model has 4 gates", gates == 4, gates as f64, 4.0, ""),
    ])
}

/// Spot-checks backpropagation through a tiny network against central
/// differences, at the largest-gradient element of every parameter tensor.
///
/// Uses 32×32 inputs in batches of 4: smaller batches leave the bottleneck
/// batch norm with too few values per channel for finite differences to
/// resolve.
pub fn network_grad_check(norm: NormKind, seed: u64) -> Result<GradCheckReport> {
    network_grad_check_at(norm, 32, 4, 1e-7, seed)
}

fn network_grad_check_at(norm: NormKind, size: usize, batch: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig::default().with_base_channels(8).with_norm(norm);
    let mut model = AttentionUNet::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E7);
    let input = FeatureMap::new(Array4::from_shape_simple_fn((batch, size, size, 1), || rng.random_range(0.0..1.0)))?;
    let target = Array3::from_shape_fn((batch, size, size), |(n, y, x)| f64::from(u8::from((y + x + n) % 5 < 2)));
    let c = (size as f64 - 1.0) / 2.0;
    let sdm = Array3::from_shape_fn((batch, size, size), |(_, y, x)| (y as f64 - c) * 0.3 + (x as f64 - c) * 0.1);
    let cfg = LossConfig::default();

    let loss_of = |m: &mut AttentionUNet<f64>| -> Result<(f64, Array3<f64>)> {
        let p = m.forward(&input, Mode::Train)?;
        let p3 = p.values().index_axis(ndarray::Axis(3), 0).to_owned();
        let (b, g) = bi_h_loss_with_grad(p3.view(), target.view(), sdm.view(), &cfg)?;
        Ok((b.total, g))
    };

    model.zero_grad();
    let (_, g) = loss_of(&mut model)?;
    model.backward(&FeatureMap::new(g.insert_axis(ndarray::Axis(3)))?);

    // (tensor index, element index, analytic gradient)
    let mut picks = Vec::new();
    let mut t_index = 0;
    model.visit("", &mut |_, t| {
        if let crate::nn::Tensor::Param(p) = t {
            let (i, g) = p
                .grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("non-empty tensor");
            // Biases feeding a batch norm have an identically zero gradient, and
            // tensors this quiet are dominated by round-off in the quotient.
            if g.abs() > 1e-3 {
                picks.push((t_index, i, *g));
            }
            t_index += 1;
        }
    });

    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for &(ti, ei, ga) in &picks {
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut k = 0;
            model.visit_mut("", &mut |_, t| {
                if let TensorMut::Param(p) = t {
                    if k == ti {
                        let v = p.value.as_slice_mut().expect("contiguous");
                        v[ei] += delta;
                    }
                    k += 1;
                }
            });
            let (l, _) = loss_of(&mut model)?;
            Ok(l)
        };
        let base = eval_at(0.0)?;
        let up = eval_at(step)?;
        let down = eval_at(-2.0 * step)?;
        eval_at(step)?;
        let (right, left) = ((up - base) / step, (base - down) / step);
        // One side of the stencil crossed a ReLU or max-pool switch: the
        // analytic gradient is the derivative on the side that did not.
        let numeric_g = if (right - left).abs() > GRAD_TOL * right.abs().max(left.abs()) {
            if (right - ga).abs() < (left - ga).abs() {
                right
            } else {
                left
            }
        } else {
            (up - down) / (2.0 * step)
        };
        analytic.push(ga);
        numeric.push(numeric_g);
    }
    Ok(GradCheckReport::compare(
        format!("network ({norm:?})"),
        &Array::from(analytic),
        &Array::from(numeric),
        step,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn finite_diff_of_mean_is_uniform() {
        let x = array![[0.3, 0.1], [0.7, 0.9]];
        let g = finite_diff_grad(|m| m.mean().unwrap(), &x, FD_STEP).unwrap();
        for &v in &g {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_reports_non_finite_pixel() {
        let x = array![0.5, 1e-6];
        let err = finite_diff_grad(|m| m.iter().map(|v: &f64| v.ln()).sum::<f64>(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index } if index == vec![1]));
    }

    #[test]
    fn oracle_hand_values() {
        let p = Array2::from_elem((2, 2), 0.5);
        let t = array![[0.0, 1.0], [1.0, 0.0]];
        let v = tiny_loss_oracle("wbce", &p, &t, OracleParams::default()).unwrap();
        assert!((v - 0.34657359027997264).abs() < 1e-12);
        assert_eq!(tiny_loss_oracle("hinge", &p, &t, OracleParams::default()).unwrap(), 1.0);
        assert_eq!(tiny_loss_oracle("dice", &t, &t, OracleParams::default()).unwrap(), 0.0);
        assert!(matches!(
            tiny_loss_oracle("tv", &p, &t, OracleParams::default()),
            Err(Error::UnknownComponent(_))
        ));
    }

    #[test]
    fn brute_force_metric_cases() {
        let eye = Array2::<u8>::eye(3);
        assert_eq!(brute_force_metrics(&eye, &eye).unwrap(), (1.0, 1.0, 1.0));
        let p = array![[1u8, 1, 0, 0]];
        let g = array![[1u8, 0, 1, 0]];
        assert_eq!(brute_force_metrics(&p, &g).unwrap(), (0.5, 0.5, 0.5));
        let all = Array2::<u8>::ones((2, 2));
        let none = Array2::<u8>::zeros((2, 2));
        assert_eq!(brute_force_metrics(&all, &none).unwrap(), (0.0, 1.0, 0.0));
    }

    #[test]
    fn boundary_gradient_is_phi_over_n() {
        let phi = array![[[1.0, -1.0], [2.0, -0.5]]];
        let p = array![[[0.2, 0.4], [0.6, 0.8]]];
        let g = finite_diff_grad(|x| boundary_loss(x.view(), phi.view()).unwrap(), &p, FD_STEP).unwrap();
        for (a, b) in g.iter().zip(phi.iter()) {
            assert!((a - b / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flipped_boundary_gradient_is_caught() {
        let outcomes = check_loss_gradients(2, 0, Some(Fault::FlipBoundaryGradient)).unwrap();
        let boundary = outcomes.iter().find(|o| o.name.contains("boundary")).unwrap();
        assert!(!boundary.passed);
        assert!(outcomes.iter().filter(|o| !o.name.contains("boundary")).all(|o| o.passed));
    }
}
