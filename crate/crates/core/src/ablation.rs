//! Trains the same architecture under different loss combinations and
//! compares test metrics.

use serde::Serialize;

use crate::data::DatasetSplit;
use crate::error::Result;
use crate::losses::{BceWeighting, LossWeights};
use crate::metrics::{evaluate, render_table_labelled, MetricsReport, Scores};
use crate::model::{AttentionUNet, ModelConfig};
use crate::train::{train, TrainConfig};

/// One loss variant: component weights plus the cross-entropy weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossVariant {
    pub name: &'static str,
    /// `None` means the configured α/β composite.
    pub terms: Option<LossWeights>,
    pub bce_weighting: BceWeighting,
}

/// The four rows of the loss comparison, hybrid last.
pub fn loss_variants() -> [LossVariant; 4] {
    let w = |wbce, dice, hinge, boundary| {
        Some(LossWeights {
            wbce,
            dice,
            hinge,
            boundary,
        })
    };
    [
        LossVariant {
            name: "BCE",
            terms: w(1.0, 0.0, 0.0, 0.0),
            bce_weighting: BceWeighting::Uniform,
        },
        LossVariant {
            name: "Dice+Boundary",
            terms: w(0.0, 1.0, 0.0, 1.0),
            bce_weighting: BceWeighting::Uniform,
        },
        LossVariant {
            name: "BCE+Dice",
            terms: w(1.0, 1.0, 0.0, 0.0),
            bce_weighting: BceWeighting::Uniform,
        },
        LossVariant {
            name: "Bi-H",
            terms: None,
            bce_weighting: BceWeighting::HedClassBalance,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub final_train_loss: f64,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn scores(&self) -> Scores {
        self.report.aggregate
    }
}

/// Trains one fresh model per variant from the same initialization seed and
/// evaluates each on the test split.
pub fn run_ablation(
    split: &DatasetSplit,
    model: &ModelConfig,
    config: &TrainConfig,
    threshold: f64,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in loss_variants() {
        let mut cfg = config.clone();
        cfg.terms = variant.terms;
        cfg.loss.bce_weighting = variant.bce_weighting;
        let (mut trained, history) = train(AttentionUNet::<f32>::new(model.clone(), cfg.seed)?, split, &cfg)?;
        let report = evaluate(&mut trained, &split.test, threshold, cfg.batch_size)?;
        let row = AblationRow {
            variant,
            final_train_loss: history.records.last().map_or(f64::NAN, |r| r.loss),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let named: Vec<(String, Scores)> = rows.iter().map(|r| (r.variant.name.to_string(), r.scores())).collect();
    render_table_labelled("Loss", &named)
}
