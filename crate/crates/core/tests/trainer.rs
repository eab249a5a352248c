mod common;

use disentangled_cbm::model::{Checkpoint, Model};
use disentangled_cbm::synth::{self, DatasetBundle, DatasetSpec};
use disentangled_cbm::trainer::{epoch_order, train, vanilla_cbm_mode, TrainConfig, Trainer};
use disentangled_cbm::Error;

fn small_data(seed: u64) -> DatasetBundle {
    synth::generate(&DatasetSpec {
        train_size: 192,
        val_size: 32,
        test_size: 32,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        reference_batch: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_runs_log_identical_losses() {
    let data = small_data(1);
    let a = train(&short(3), &data).unwrap();
    let b = train(&short(3), &data).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.model, b.model);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_data(2);
    let config = TrainConfig {
        warmup_epochs: 0,
        ..short(3)
    };
    let mut t = Trainer::new(&config, &data).unwrap();
    t.set_learning_rate(0.0).unwrap();
    let before = t.model().parameters();
    t.run_epoch(0).unwrap();
    assert_eq!(t.model().parameters(), before);
    assert!(t.log().steps.iter().all(|s| s.loss.l_total.is_finite()));
    assert!(t.set_learning_rate(-1.0).is_err());
}

#[test]
fn vanilla_mode_disables_grouping_and_shares_initialization() {
    let data = small_data(3);
    let config = short(4);
    let base = vanilla_cbm_mode(&config);
    assert_eq!(base.lambda_g, 0.0);
    assert!(!base.grouping);
    let grouped = Trainer::new(&config, &data).unwrap();
    let plain = Trainer::new(&base, &data).unwrap();
    assert_eq!(grouped.model().backbone, plain.model().backbone);
    assert_eq!(grouped.model().class_head, plain.model().class_head);

    let out = train(&base, &data).unwrap();
    assert_eq!(out.spectral_calls, 0);
    assert!(out.log.reclusters.is_empty());
    assert!(out.log.steps.iter().all(|s| s.loss.l_g == 0.0));
}

#[test]
fn grouped_run_reclusters_on_schedule() {
    let data = small_data(4);
    let out = train(&short(5), &data).unwrap();
    let epochs: Vec<usize> = out.log.reclusters.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![2, 4]);
    assert_eq!(out.spectral_calls, 2);
    let warm = out.log.steps.iter().filter(|s| s.epoch < 2);
    assert!(warm.clone().all(|s| s.loss.lambda_g == 0.0));
    assert!(out.log.steps.iter().filter(|s| s.epoch >= 2).all(|s| s.loss.lambda_g == 0.01));
}

#[test]
fn step_breakdowns_recompute_their_totals() {
    let data = small_data(5);
    let out = train(&short(3), &data).unwrap();
    for s in &out.log.steps {
        assert!((s.loss.recompute() - s.loss.l_total).abs() <= 1e-12, "{:?}", s.loss);
    }
}

#[test]
fn assignment_only_changes_at_recluster_events() {
    let data = small_data(6);
    let config = short(5);
    let mut t = Trainer::new(&config, &data).unwrap();
    let n = data.train.len();
    for epoch in 0..config.epochs {
        let order = epoch_order(n, config.seed, epoch);
        if t.reclusters_at(epoch) {
            t.recluster(epoch, &order[..config.reference_batch]).unwrap();
        }
        let held = t.model().assignment.clone();
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            t.step(epoch, batch).unwrap();
            assert_eq!(t.model().assignment, held);
            t.model().concept_heads.check_sync(&held).unwrap();
        }
    }
    assert_eq!(t.spectral_calls(), 2);
}

#[test]
fn single_group_never_reclusters() {
    let data = small_data(7);
    let config = TrainConfig {
        k: 1,
        lambda_g: 0.0,
        ..short(4)
    };
    let out = train(&config, &data).unwrap();
    assert_eq!(out.spectral_calls, 0);
}

/// The grouped trainer with `lambda_g = 0` and one group must follow a
/// loop that never builds the grouping term, to the last bit.
#[test]
fn single_group_without_grouping_weight_matches_plain_loop() {
    let data = small_data(8);
    let config = TrainConfig {
        k: 1,
        lambda_g: 0.0,
        ..short(2)
    };
    let out = train(&config, &data).unwrap();
    let oracle = common::vanilla::losses(&config, &data);
    assert_eq!(out.log.steps.len(), oracle.len());
    for (s, &(l_y, l_c, l_total)) in out.log.steps.iter().zip(&oracle) {
        assert_eq!(s.loss.l_y.to_bits(), l_y.to_bits(), "step {}", s.step);
        assert_eq!(s.loss.l_c.to_bits(), l_c.to_bits(), "step {}", s.step);
        assert_eq!(s.loss.l_total.to_bits(), l_total.to_bits(), "step {}", s.step);
    }
}

#[test]
fn checkpoints_reload_bit_exact() {
    let data = small_data(9);
    let out = train(&short(3), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.json");
    let ck = out.checkpoint(&data, 3);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bits = |m: &Model| -> Vec<u64> { m.parameters().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect() };
    assert_eq!(bits(&back.model), bits(&out.model));
    assert_eq!(back, ck);
    back.check_dataset(&data.spec).unwrap();
}

#[test]
fn corrupted_checkpoint_payload_is_rejected() {
    let data = small_data(10);
    let out = train(&short(1), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    out.checkpoint(&data, 1).save(&path).unwrap();
    let bin = dir.path().join("ck.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data(11);
    let bad = [
        TrainConfig { recluster_period: 0, ..short(1) },
        TrainConfig { k: 0, ..short(1) },
        TrainConfig { k: 33, ..short(1) },
        TrainConfig { learning_rate: 0.0, ..short(1) },
        TrainConfig { grouping: false, ..short(1) },
    ];
    for config in bad {
        assert!(matches!(Trainer::new(&config, &data), Err(Error::Config(_))), "{config:?}");
    }
}

/// Epoch-mean loss on the default task falls through the first ten epochs,
/// allowing one uptick.
#[test]
fn default_task_loss_decreases_early() {
    let data = synth::generate(&DatasetSpec::default()).unwrap();
    let out = train(&TrainConfig { epochs: 10, ..TrainConfig::default() }, &data).unwrap();
    let means: Vec<f64> = out.log.epochs.iter().map(|e| e.mean_l_total).collect();
    let ups = means.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(ups <= 1, "{means:?}");
}
