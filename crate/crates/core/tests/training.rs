use std::collections::BTreeMap;

use hunet::data::{make_split, group_by_scan, stack_images, stack_masks, stack_sdms, synth_blobs, DatasetSplit, SamplePair};
use hunet::losses::{bi_h_loss_with_grad, LossConfig};
use hunet::metrics::evaluate;
use hunet::model::{AttentionUNet, ModelConfig, NormKind};
use hunet::nn::{FeatureMap, Mode, Module, Tensor};
use hunet::train::{
    load_checkpoint, load_checkpoint_for, read_checkpoint_meta, save_checkpoint, train, train_with, Optimizer,
    OptimizerKind, SchedulerKind, TrainConfig, TrainContext, CHECKPOINT_VERSION,
};
use hunet::Error;
use ndarray::Axis;

fn small_model(norm: NormKind, seed: u64) -> AttentionUNet<f32> {
    AttentionUNet::new(ModelConfig::default().with_base_channels(8).with_norm(norm), seed).unwrap()
}

fn synth_split(count: usize, size: usize, seed: u64) -> DatasetSplit {
    make_split(group_by_scan(synth_blobs(count, size, seed).unwrap()), 0.2, seed).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_are_100_epochs_of_32() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size, c.lr), (100, 32, 1e-3));
    assert_eq!(c.optimizer, OptimizerKind::Adam);
    assert_eq!(c.scheduler, SchedulerKind::ReduceOnPlateau);
}

#[test]
fn every_parameter_group_receives_gradient() {
    let mut model = small_model(NormKind::Batch, 1);
    let samples = synth_blobs(4, 32, 9).unwrap();
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let input = stack_images::<f32>(&refs).unwrap();
    let p = model.forward(&input, Mode::Train).unwrap();
    let (_, g) = bi_h_loss_with_grad(
        p.values().index_axis(Axis(3), 0),
        stack_masks::<f32>(&refs).view(),
        stack_sdms::<f32>(&refs).view(),
        &LossConfig::default(),
    )
    .unwrap();
    model.backward(&FeatureMap::new(g.insert_axis(Axis(3))).unwrap());

    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    model.visit("", &mut |name, t| {
        if let Tensor::Param(p) = t {
            let group = name.split('.').next().unwrap().to_string();
            *groups.entry(group).or_default() += p.grad.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        }
    });
    for level in 0..4 {
        assert!(groups.contains_key(&format!("gate{level}")));
    }
    assert_eq!(groups.len(), 4 + 1 + 4 * 3 + 1);
    for (name, norm) in &groups {
        assert!(*norm > 0.0 && norm.is_finite(), "{name} has gradient norm {norm}");
    }
    Optimizer::new(OptimizerKind::Adam, 1e-3).step(&mut model);
}

#[test]
fn history_has_one_record_per_epoch_and_non_increasing_lr() {
    let split = synth_split(20, 32, 4);
    let mut config = quick_config(8);
    config.plateau.patience = 1;
    let (_, history) = train(small_model(NormKind::Batch, 2), &split, &config).unwrap();
    assert_eq!(history.records.len(), 8);
    assert_eq!(history.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    for w in history.records.windows(2) {
        assert!(w[1].lr <= w[0].lr);
    }
}

#[test]
fn same_seed_gives_identical_first_epoch() {
    let split = synth_split(12, 32, 5);
    let run = || {
        let (_, h) = train(small_model(NormKind::None, 8), &split, &quick_config(1)).unwrap();
        h.records[0].loss
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn loss_falls_over_ten_epochs() {
    let split = synth_split(40, 32, 11);
    let (_, h) = train(small_model(NormKind::Batch, 3), &split, &quick_config(10)).unwrap();
    assert!(h.records[9].loss < h.records[0].loss, "{:?}", h.records.iter().map(|r| r.loss).collect::<Vec<_>>());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let split = synth_split(10, 32, 6);
    let config = TrainConfig {
        checkpoint_every: 1,
        ..quick_config(7)
    };
    let outcome = train_with(
        small_model(NormKind::Batch, 4),
        &split,
        &config,
        TrainContext {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            on_epoch: None,
        },
    )
    .unwrap();
    for epoch in 1..=7 {
        assert!(dir.path().join(format!("ckpt_epoch{epoch}.bin")).exists());
    }
    assert!(dir.path().join("ckpt_best.bin").exists());
    let meta = read_checkpoint_meta(&dir.path().join("ckpt_epoch7.bin")).unwrap();
    assert_eq!(meta.epoch, 7);
    assert_eq!(meta.scalar, "f32");

    let mut loaded = load_checkpoint::<f32>(&dir.path().join("ckpt_epoch7.bin")).unwrap();
    let mut original = outcome.model.clone();
    let input = stack_images::<f32>(&split.test.iter().collect::<Vec<_>>()).unwrap();
    let a = original.forward(&input, Mode::Eval).unwrap();
    let b = loaded.model.forward(&input, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let opt = loaded.optimizer.unwrap();
    assert_eq!(opt.steps, outcome.optimizer.steps);
    assert_eq!(opt.slots.len(), outcome.optimizer.slots.len());

    let best = load_checkpoint::<f32>(&dir.path().join("ckpt_best.bin")).unwrap();
    assert_eq!(best.meta.epoch, outcome.best_epoch);
    let mut best_model = best.model;
    let r1 = evaluate(&mut best_model, &split.test, 0.5, 4).unwrap();
    let mut kept = outcome.best.clone();
    let r2 = evaluate(&mut kept, &split.test, 0.5, 4).unwrap();
    assert_eq!(r1.counts, r2.counts);
}

#[test]
fn checkpoint_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = small_model(NormKind::Batch, 1);
    save_checkpoint(&path, &model, None, &LossConfig::default(), 0, BTreeMap::new()).unwrap();

    let other = ModelConfig::default().with_base_channels(16);
    assert!(matches!(load_checkpoint_for::<f32>(&path, &other), Err(Error::ArchitectureMismatch(_))));
    assert!(load_checkpoint_for::<f32>(&path, model.config()).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 99;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::CheckpointVersion { found: 99, expected } if expected == CHECKPOINT_VERSION));
    assert!(err.to_string().contains("99"));

    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn divergence_aborts_with_batch_index() {
    let mut split = synth_split(10, 32, 6);
    split.train[0].image.pixels[[3, 3]] = f32::NAN;
    let mut config = quick_config(2);
    config.augment_hflip = false;
    config.batch_size = 1;
    match train(small_model(NormKind::None, 4), &split, &config) {
        Err(Error::Diverged { epoch, batch }) => {
            assert_eq!(epoch, 1);
            assert!(batch < split.train.len());
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h.records.len())),
    }
}
