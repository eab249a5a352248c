mod common;

use disentangled_cbm::eval::{
    argmax, class_accuracy, evaluate, export_cluster_embeddings, intervene, intervention_curve, spearman,
    true_concept_accuracy, InterventionMode, InterventionPolicy, InterventionUnit, MetricsReport,
};
use disentangled_cbm::model::Model;
use disentangled_cbm::synth::{self, DatasetSpec};
use disentangled_cbm::trainer::TrainConfig;
use disentangled_cbm::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_probs(seed: u64, n: usize, m: usize) -> (Tensor, Tensor) {
    let mut r = common::rng(seed);
    let p = Tensor::new(vec![n, m], (0..n * m).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let c = Tensor::new(vec![n, m], (0..n * m).map(|_| f64::from(r.random_range(0..2u8))).collect()).unwrap();
    (p, c)
}

fn fresh_model(seed: u64) -> Model {
    let config = TrainConfig::default();
    let spec = DatasetSpec::default();
    let c2g = config.concept_to_group.resolve(&spec, config.k).unwrap();
    Model::init(&config.backbone, c2g, config.k, spec.classes, seed).unwrap()
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        train_size: 64,
        val_size: 16,
        test_size: 200,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn intervention_extremes() {
    let (p, c) = random_probs(1, 20, 8);
    let policy = |mode, rate| InterventionPolicy::per_concept(mode, rate, 4);
    assert_eq!(intervene(&p, &c, &policy(InterventionMode::Correct, 0.0)).unwrap(), p);
    assert_eq!(intervene(&p, &c, &policy(InterventionMode::Incorrect, 0.0)).unwrap(), p);
    assert_eq!(intervene(&p, &c, &policy(InterventionMode::Correct, 1.0)).unwrap(), c);
    let flipped = Tensor::new(c.shape().to_vec(), c.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert_eq!(intervene(&p, &c, &policy(InterventionMode::Incorrect, 1.0)).unwrap(), flipped);
    assert!(intervene(&p, &c, &policy(InterventionMode::Correct, 1.5)).is_err());
}

#[test]
fn per_group_units_move_together() {
    let (p, c) = random_probs(2, 30, 8);
    let policy = InterventionPolicy {
        mode: InterventionMode::Incorrect,
        rate: 0.5,
        unit: InterventionUnit::PerConceptGroup,
        concept_groups: Some(vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]),
        seed: 9,
    };
    let out = intervene(&p, &c, &policy).unwrap();
    for n in 0..30 {
        let touched: Vec<bool> = (0..8).map(|i| out.at2(n, i) != p.at2(n, i)).collect();
        for g in 0..4 {
            assert_eq!(touched[2 * g], touched[2 * g + 1], "sample {n} group {g}");
        }
        assert_eq!(touched.iter().filter(|&&t| t).count(), 4);
    }
    let overlapping = InterventionPolicy {
        concept_groups: Some(vec![vec![0, 1], vec![1, 2, 3, 4, 5, 6, 7]]),
        ..policy
    };
    assert!(intervene(&p, &c, &overlapping).is_err());
}

proptest! {
    #[test]
    fn full_intervention_is_idempotent(seed in 0u64..300, incorrect in any::<bool>()) {
        let (p, c) = random_probs(seed, 6, 5);
        let mode = if incorrect { InterventionMode::Incorrect } else { InterventionMode::Correct };
        let policy = InterventionPolicy::per_concept(mode, 1.0, seed);
        let once = intervene(&p, &c, &policy).unwrap();
        let twice = intervene(&once, &c, &policy).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn partial_intervention_touches_the_chosen_fraction(seed in 0u64..300, rate in 0.0f64..=1.0) {
        let (p, c) = random_probs(seed, 5, 8);
        let out = intervene(&p, &c, &InterventionPolicy::per_concept(InterventionMode::Correct, rate, seed)).unwrap();
        let take = (rate * 8.0).round() as usize;
        for n in 0..5 {
            let exact = (0..8).filter(|&i| out.at2(n, i) == c.at2(n, i)).count();
            let kept = (0..8).filter(|&i| out.at2(n, i) == p.at2(n, i)).count();
            prop_assert!(exact >= take);
            prop_assert_eq!(kept, 8 - take);
        }
    }

    #[test]
    fn argmax_ignores_a_common_shift(row in prop::collection::vec(-10.0f64..10.0, 2..8), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let a = argmax(&row);
        let b = argmax(&shifted);
        // A shift can merge two near-equal entries through rounding; then the
        // lower index wins.
        prop_assert!(a == b || (row[a] - row[b]).abs() < 1e-12);
    }

    #[test]
    fn report_concept_accuracy_is_the_mean_of_its_columns(seed in 0u64..300) {
        let (p, c) = random_probs(seed, 7, 5);
        let logits = random_probs(seed + 1, 7, 3).0;
        let labels: Vec<usize> = (0..7).map(|i| i % 3).collect();
        let r = MetricsReport::compute(&p, &c, &logits, &labels).unwrap();
        let mean = r.per_concept.iter().sum::<f64>() / 5.0;
        prop_assert!((r.c_acc - mean).abs() <= 1e-12);
        prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 7);
    }
}

#[test]
fn argmax_ties_go_to_the_lowest_id() {
    assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
    assert_eq!(class_accuracy(&Tensor::full(&[3, 4], 1.0), &[0, 0, 1]).unwrap(), 2.0 / 3.0);
}

#[test]
fn spearman_cases() {
    assert_eq!(spearman(&[0.0, 1.0, 2.0], &[1.0, 5.0, 9.0]), Some(1.0));
    assert_eq!(spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[0.0, 1.0], &[1.0, 1.0]), None);
}

#[test]
fn curve_has_one_row_per_mode_and_rate() {
    let data = synth::generate(&small_spec(3)).unwrap();
    let model = fresh_model(3);
    let template = InterventionPolicy::per_concept(InterventionMode::Correct, 0.0, 5);
    let rows = intervention_curve(
        &model,
        &data.test,
        &data.spec,
        &[1.0, 0.0, 0.5],
        &[InterventionMode::Incorrect, InterventionMode::Correct],
        &template,
        2,
    )
    .unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].mode, InterventionMode::Correct);
    assert_eq!(rows.iter().map(|r| r.rate).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    let full = true_concept_accuracy(&model.class_head, &data.test).unwrap();
    assert_eq!(rows[2].a_acc, full);
}

#[test]
fn untrained_model_is_near_chance() {
    let accs: Vec<f64> = (0..3)
        .map(|seed| {
            let data = synth::generate(&small_spec(seed)).unwrap();
            evaluate(&fresh_model(seed), &data.test, &data.spec).unwrap().a_acc
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    assert!((mean - 0.25).abs() <= 0.1, "{accs:?}");
}

#[test]
fn cluster_export_rows_and_determinism() {
    let data = synth::generate(&small_spec(4)).unwrap();
    let model = fresh_model(4);
    let a = export_cluster_embeddings(&model, &data.train, &data.spec, 7, 16).unwrap();
    let b = export_cluster_embeddings(&model, &data.train, &data.spec, 7, 16).unwrap();
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 + 16);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 32);
    for (f, row) in rows.iter().enumerate() {
        let g: usize = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(g, model.assignment.group_of()[f]);
    }
}
