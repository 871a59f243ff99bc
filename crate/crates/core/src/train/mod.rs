//! Optimization loop, learning-rate schedule, history and checkpoints.

mod checkpoint;
mod history;
mod optim;
mod scheduler;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_checkpoint_meta, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use history::{EpochRecord, TrainHistory};
pub use optim::{Optimizer, OptimizerKind, Slot, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};
pub use scheduler::{PlateauConfig, ReduceOnPlateau, SchedulerKind};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{group_by_scan, held_out_count, stack_images, stack_masks, stack_sdms, DatasetSplit, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{weighted_composite_with_grad, LossConfig, LossWeights};
use crate::metrics::evaluate;
use crate::model::AttentionUNet;
use crate::nn::{FeatureMap, Mode, Module};
use crate::scalar::Scalar;

/// Binarization threshold for the per-epoch validation Dice.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub scheduler: SchedulerKind,
    pub plateau: PlateauConfig,
    pub seed: u64,
    /// Write `ckpt_epoch{N}.bin` every this many epochs; 0 writes only the
    /// final and best checkpoints.
    pub checkpoint_every: usize,
    pub augment_hflip: bool,
    /// Fraction of training scans held out for validation. When unset or 0
    /// the test split doubles as the validation set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    /// Filled from the run configuration's `[loss]` section.
    #[serde(skip)]
    pub loss: LossConfig,
    /// Overrides the α/β weighting, for ablation runs.
    #[serde(skip)]
    pub terms: Option<LossWeights>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            scheduler: SchedulerKind::ReduceOnPlateau,
            plateau: PlateauConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            augment_hflip: true,
            val_fraction: None,
            loss: LossConfig::default(),
            terms: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(f) = self.val_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {f}")));
            }
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 || !(p.min_lr >= 0.0) {
            return Err(Error::Config("plateau needs 0 < factor < 1, patience >= 1, min_lr >= 0".into()));
        }
        self.loss.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.terms.unwrap_or_else(|| self.loss.weights())
    }
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainContext<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// State after the last epoch.
    pub model: AttentionUNet<T>,
    /// State at the epoch with the highest validation Dice.
    pub best: AttentionUNet<T>,
    pub best_epoch: usize,
    pub optimizer: Optimizer<T>,
    pub history: TrainHistory,
}

pub fn train<T: Scalar>(
    model: AttentionUNet<T>,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(AttentionUNet<T>, TrainHistory)> {
    train_with(model, split, config, TrainContext::default()).map(|o| (o.model, o.history))
}

/// Splits off validation scans from the training side when configured.
fn training_and_validation(split: &DatasetSplit, config: &TrainConfig) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let fraction = config.val_fraction.unwrap_or(0.0);
    if fraction > 0.0 {
        let mut groups = group_by_scan(split.train.clone());
        if groups.len() >= 2 {
            let n_val = held_out_count(groups.len(), fraction);
            groups.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5A11));
            let val = groups.drain(..n_val).flatten().collect();
            return (groups.into_iter().flatten().collect(), val);
        }
    }
    (split.train.clone(), split.test.clone())
}

pub fn train_with<T: Scalar>(
    mut model: AttentionUNet<T>,
    split: &DatasetSplit,
    config: &TrainConfig,
    mut ctx: TrainContext<'_>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (mut train_set, val_set) = training_and_validation(split, config);
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in &mut train_set {
        s.ensure_sdm();
    }
    if let Some(dir) = &ctx.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let weights = config.loss_weights();
    let mut optimizer = Optimizer::new(config.optimizer, config.lr);
    let mut plateau = ReduceOnPlateau::new(config.plateau);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory {
        seed: config.seed,
        records: Vec::with_capacity(config.epochs),
    };
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let flipped: Vec<SamplePair>;
            let batch: Vec<&SamplePair> = if config.augment_hflip {
                flipped = chunk
                    .iter()
                    .map(|&i| {
                        if rng.random_bool(0.5) {
                            train_set[i].flipped()
                        } else {
                            train_set[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };

            let input = stack_images::<T>(&batch)?;
            let target = stack_masks::<T>(&batch);
            let sdm = stack_sdms::<T>(&batch);
            let probs = model.forward(&input, Mode::Train)?;
            let pred = probs.values().index_axis(Axis(3), 0);
            let (parts, grad) = weighted_composite_with_grad(pred, target.view(), sdm.view(), &weights, &config.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            model.zero_grad();
            model.backward(&FeatureMap::new(grad.insert_axis(Axis(3)))?);
            optimizer.step(&mut model);

            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.total, parts.wbce, parts.dice, parts.hinge, parts.boundary]) {
                *s += v.as_f64() * n;
            }
        }

        let val_dice = evaluate(&mut model, &val_set, VALIDATION_THRESHOLD, config.batch_size)?.aggregate.dice;
        let count = train_set.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / count,
            wbce: sums[1] / count,
            dice: sums[2] / count,
            hinge: sums[3] / count,
            boundary: sums[4] / count,
            val_dice,
            lr: optimizer.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if config.scheduler == SchedulerKind::ReduceOnPlateau {
            optimizer.lr = plateau.step(optimizer.lr, val_dice);
        }

        let improved = val_dice > best.2;
        if improved {
            best = (model.clone(), epoch, val_dice);
        }
        if let Some(dir) = &ctx.checkpoint_dir {
            let metrics = snapshot(&record);
            if improved {
                save_checkpoint(&dir.join("ckpt_best.bin"), &model, Some(&optimizer), &config.loss, epoch, metrics.clone())?;
            }
            let periodic = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
            if periodic || epoch == config.epochs {
                let path = dir.join(format!("ckpt_epoch{epoch}.bin"));
                save_checkpoint(&path, &model, Some(&optimizer), &config.loss, epoch, metrics)?;
            }
        }
        if let Some(cb) = ctx.on_epoch.as_mut() {
            cb(&record);
        }
        history.records.push(record);
    }

    Ok(TrainOutcome {
        model,
        best: best.0,
        best_epoch: best.1,
        optimizer,
        history,
    })
}

fn snapshot(r: &EpochRecord) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("loss".to_string(), r.loss),
        ("val_dice".to_string(), r.val_dice),
        ("lr".to_string(), r.lr),
    ])
}
