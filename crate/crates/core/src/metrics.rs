//! Confusion counts, Dice / sensitivity / specificity, and evaluation reports.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use ndarray::{ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, SamplePair};
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::nn::check_dims;
use crate::scalar::Scalar;

/// Pixel-level confusion counts of a binary prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn dice(&self) -> f64 {
        dice_coefficient(self)
    }

    pub fn sensitivity(&self) -> f64 {
        sensitivity(self)
    }

    pub fn specificity(&self) -> f64 {
        specificity(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts agreement between two binary masks of equal shape.
pub fn confusion<D: Dimension>(pred: ArrayView<'_, u8, D>, gt: ArrayView<'_, u8, D>) -> Result<ConfusionCounts> {
    check_dims("confusion", gt.shape(), pred.shape())?;
    if pred.iter().chain(gt.iter()).any(|&v| v > 1) {
        return Err(Error::NonBinary("confusion input"));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p, g) {
        (1, 1) => c.tp += 1,
        (1, _) => c.fp += 1,
        (_, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    });
    Ok(c)
}

/// `2·tp / (2·tp + fp + fn)`; 1.0 when both masks are empty.
pub fn dice_coefficient(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `tp / (tp + fn)`; 1.0 when there is no foreground.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// `tn / (tn + fp)`; 1.0 when there is no background.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    let denom = c.tn + c.fp;
    if denom == 0 {
        1.0
    } else {
        c.tn as f64 / denom as f64
    }
}

/// Thresholds probabilities: `p > threshold` is foreground.
pub fn binarize<T: Scalar, D: Dimension>(probs: ArrayView<'_, T, D>, threshold: f64) -> ndarray::Array<u8, D> {
    let t = T::of(threshold);
    probs.mapv(|p| u8::from(p > t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl From<&ConfusionCounts> for Scores {
    fn from(c: &ConfusionCounts) -> Self {
        Self {
            dice: c.dice(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: Scores,
    /// Which scores fell back to the 0/0 convention.
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub per_sample: Vec<SampleMetrics>,
    /// Totals over all samples.
    pub counts: ConfusionCounts,
    /// Scores from summed counts (micro average).
    pub aggregate: Scores,
    /// Mean of per-sample scores (macro average).
    pub macro_average: Scores,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, threshold: f64) -> Self {
        let counts: ConfusionCounts = per_sample.iter().map(|s| s.counts).sum();
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&Scores) -> f64| per_sample.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
        let macro_average = Scores {
            dice: mean(|s| s.dice),
            sensitivity: mean(|s| s.sensitivity),
            specificity: mean(|s| s.specificity),
        };
        Self {
            threshold,
            aggregate: Scores::from(&counts),
            counts,
            macro_average,
            per_sample,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One-row comparison table using the aggregate scores.
    pub fn to_table(&self, model: &str) -> String {
        render_table(&[(model.to_string(), self.aggregate)])
    }
}

impl SampleMetrics {
    pub fn new(id: impl Into<String>, counts: ConfusionCounts) -> Self {
        let mut degenerate = Vec::new();
        if 2 * counts.tp + counts.fp + counts.fn_ == 0 {
            degenerate.push("dice".to_string());
        }
        if counts.tp + counts.fn_ == 0 {
            degenerate.push("sensitivity".to_string());
        }
        if counts.tn + counts.fp == 0 {
            degenerate.push("specificity".to_string());
        }
        Self {
            id: id.into(),
            scores: Scores::from(&counts),
            counts,
            degenerate,
        }
    }
}

/// Aligned text table with columns `Model | Dice | Sensitivity | Specificity`.
pub fn render_table(rows: &[(String, Scores)]) -> String {
    render_table_labelled("Model", rows)
}

/// Like [`render_table`] with a different first-column header.
pub fn render_table_labelled(label: &str, rows: &[(String, Scores)]) -> String {
    let headers = [label, "Dice", "Sensitivity", "Specificity"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, s)| {
            [
                name.clone(),
                format!("{:.4}", s.dice),
                format!("{:.4}", s.sensitivity),
                format!("{:.4}", s.specificity),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |vals: [&str; 4]| {
        vals.iter()
            .zip(widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(headers));
    let _ = writeln!(out, "{}", widths.map(|w| "-".repeat(w)).join("-+-"));
    for row in &cells {
        let _ = writeln!(out, "{}", line([&row[0], &row[1], &row[2], &row[3]].map(String::as_str)));
    }
    out
}

/// Runs `model` over `samples` in evaluation mode and scores thresholded output.
pub fn evaluate<T: Scalar, M: Segmenter<T> + ?Sized>(
    model: &mut M,
    samples: &[SamplePair],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample list".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let refs: Vec<&SamplePair> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let probs = model.predict(&stack_images::<T>(chunk)?)?;
        for (i, s) in chunk.iter().enumerate() {
            let p = probs.values().index_axis(Axis(0), i);
            let pred = binarize(p.index_axis(Axis(2), 0), threshold);
            per_sample.push(SampleMetrics::new(s.id(), confusion(pred.view(), s.mask.pixels().view())?));
        }
    }
    Ok(MetricsReport::from_samples(per_sample, threshold))
}
