//! Whole-pipeline journeys through the public API: generate a dataset,
//! persist it, reload it, train on it, checkpoint to disk, and evaluate.

use capseg::data::{self, Split, SynthParams};
use capseg::losses::LossConfig;
use capseg::model::{Model, ModelConfig};
use capseg::trainer::{self, Checkpoint, OptimizerState, PostprocessConfig, TrainConfig};
use tempfile::TempDir;

fn journey_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        stem_channels: vec![8, 16],
        supervision_scales: vec![2, 4],
        scale_weights: vec![1.0, 1.0, 1.0],
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        stem_channels: vec![4],
        supervision_scales: vec![2],
        scale_weights: vec![1.0, 1.0],
    }
}

#[test]
fn dataset_survives_the_disk_roundtrip() {
    let samples = data::synth_generate(12, 16, &SynthParams::default(), 5).unwrap();
    let tmp = TempDir::new().unwrap();
    data::save_dataset(tmp.path(), Split::Train, &samples).unwrap();
    let (loaded, stats) = data::load_dataset(tmp.path(), Split::Train).unwrap();

    assert_eq!(loaded.len(), samples.len());
    assert_eq!(stats.missing_nonexpert, 0);
    assert_eq!(stats.malformed_stems, 0);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.case_id, b.case_id);
        assert_eq!(a.slice_index, b.slice_index);
        assert_eq!(a.spacing, b.spacing);
        // Masks are binary and survive exactly; images pass through 8-bit
        // quantization once.
        assert_eq!(a.expert_mask, b.expert_mask, "{}", a.stem());
        assert_eq!(a.nonexpert_mask, b.nonexpert_mask, "{}", a.stem());
        let max_err = a
            .image
            .iter()
            .zip(b.image.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "{}: {max_err}", a.stem());
    }
}

#[test]
fn training_on_reloaded_data_improves_dice_and_checkpoints_reproduce_it() {
    let tmp = TempDir::new().unwrap();
    let generated = data::synth_generate(24, 32, &SynthParams::default(), 7).unwrap();
    data::save_dataset(tmp.path(), Split::Train, &generated).unwrap();
    let test_set = data::synth_generate(8, 32, &SynthParams::default(), 808).unwrap();
    data::save_dataset(tmp.path(), Split::Test, &test_set).unwrap();

    let (train_set, _) = data::load_dataset(tmp.path(), Split::Train).unwrap();
    let (test_set, _) = data::load_dataset(tmp.path(), Split::Test).unwrap();

    let mut model = Model::new(journey_model(), 3).unwrap();
    let post = PostprocessConfig::default();
    let untrained = trainer::evaluate(&model, &test_set, 0.5, &post).unwrap();

    let cfg = TrainConfig { epochs: 40, batch_size: 4, seed: 3, ..TrainConfig::default() };
    let loss_cfg = LossConfig::default();
    let logs = trainer::train(&mut model, &train_set, &cfg, &loss_cfg).unwrap();

    assert_eq!(logs.len(), 40);
    let first = logs.first().unwrap().mean_loss;
    let last = logs.last().unwrap().mean_loss;
    assert!(last * 3.0 < first, "loss barely moved: {first} -> {last}");

    let trained = trainer::evaluate(&model, &test_set, 0.5, &post).unwrap();
    assert!(trained.mean_dice > 0.85, "trained dice {}", trained.mean_dice);
    assert!(
        trained.mean_dice > untrained.mean_dice + 0.3,
        "no improvement: {} -> {}",
        untrained.mean_dice,
        trained.mean_dice
    );

    // The checkpoint on disk carries everything needed to reproduce the
    // evaluation bit for bit.
    let state = OptimizerState::new(cfg.optimizer, model.store().total_len());
    let ckpt = Checkpoint::capture(&model, &cfg, &loss_cfg, &state, cfg.epochs, &logs);
    let path = tmp.path().join("checkpoint.json");
    trainer::save_checkpoint(&path, &ckpt).unwrap();
    let (restored, _) = trainer::load_checkpoint(&path).unwrap().restore().unwrap();
    let replayed = trainer::evaluate(&restored, &test_set, 0.5, &post).unwrap();
    assert_eq!(replayed, trained);
}

#[test]
fn resume_through_a_checkpoint_file_matches_straight_training() {
    let samples = data::synth_generate(8, 16, &SynthParams::default(), 11).unwrap();
    let loss_cfg = LossConfig::default();
    let straight_cfg = TrainConfig { epochs: 4, batch_size: 4, seed: 5, ..TrainConfig::default() };

    let mut straight = Model::new(tiny_model(), 5).unwrap();
    let straight_logs =
        trainer::train(&mut straight, &samples, &straight_cfg, &loss_cfg).unwrap();

    let mut halted = Model::new(tiny_model(), 5).unwrap();
    let mut state = OptimizerState::new(straight_cfg.optimizer, halted.store().total_len());
    let half_cfg = TrainConfig { epochs: 2, ..straight_cfg.clone() };
    let mut logs =
        trainer::train_epochs(&mut halted, &samples, &half_cfg, &loss_cfg, &mut state, 0).unwrap();

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("halfway.json");
    let ckpt = Checkpoint::capture(&halted, &half_cfg, &loss_cfg, &state, 2, &logs);
    trainer::save_checkpoint(&path, &ckpt).unwrap();

    let reloaded = trainer::load_checkpoint(&path).unwrap();
    let (mut resumed, mut resumed_state) = reloaded.restore().unwrap();
    let mut resumed_cfg = reloaded.train_config.clone();
    resumed_cfg.epochs = 4;
    logs.extend(
        trainer::train_epochs(
            &mut resumed,
            &samples,
            &resumed_cfg,
            &loss_cfg,
            &mut resumed_state,
            reloaded.epoch,
        )
        .unwrap(),
    );

    assert_eq!(resumed.store().data(), straight.store().data(), "weights diverged");
    let losses = |logs: &[trainer::EpochLog]| logs.iter().map(|l| l.mean_loss).collect::<Vec<_>>();
    assert_eq!(losses(&logs), losses(&straight_logs));
}
