mod common;

use disentangled_cbm::autodiff::Tape;
use disentangled_cbm::filter_stats::SimilarityMatrix;
use disentangled_cbm::gradcheck::{central_differences, compare};
use disentangled_cbm::grouping::{
    build_masks, grouping_loss, grouping_objective, spectral_cluster, GroupAssignment, GROUPING_EPS,
};
use disentangled_cbm::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix {
        s: Tensor::from_rows(rows).unwrap(),
        epsilon: 0.0,
    }
}

fn block_diagonal(sizes: &[usize]) -> Vec<Vec<f64>> {
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g, n)).collect();
    let n = labels.len();
    (0..n)
        .map(|i| (0..n).map(|j| if labels[i] == labels[j] { 2.0 } else { 0.0 }).collect())
        .collect()
}

#[test]
fn brute_force_enumerates_stirling_numbers() {
    assert_eq!(common::set_partitions(4, 2).len(), 7);
    assert_eq!(common::set_partitions(5, 3).len(), 25);
    assert_eq!(common::set_partitions(10, 3).len(), 9330);
}

#[test]
fn oracle_objective_agrees_with_library_loss() {
    let mut r = common::rng(31);
    for _ in 0..20 {
        let (s, truth) = common::noisy_blocks(&mut r, 7, 3, 1.6, 0.4, 0.3);
        let a = GroupAssignment::new(truth.clone(), 3).unwrap();
        let lib = grouping_objective(&Tensor::from_rows(&s).unwrap(), &a, GROUPING_EPS).unwrap();
        let oracle = common::objective(&s, &truth, 3, GROUPING_EPS);
        assert!((lib - oracle).abs() < 1e-12, "{lib} vs {oracle}");
    }
}

#[test]
fn noiseless_two_blocks_of_three_are_recovered() {
    let s = sim(&block_diagonal(&[3, 3]));
    for seed in 0..5 {
        let a = spectral_cluster(&s, 2, seed).unwrap();
        assert_eq!(a.canonical().group_of(), &[0, 0, 0, 1, 1, 1]);
    }
}

#[test]
fn noiseless_blocks_match_brute_force_exactly() {
    for sizes in [vec![2, 3], vec![4, 4], vec![2, 3, 4], vec![3, 3, 3], vec![5, 2, 3]] {
        let rows = block_diagonal(&sizes);
        let k = sizes.len();
        let (best, _) = common::brute_force(&rows, k, GROUPING_EPS);
        let got = spectral_cluster(&sim(&rows), k, 7).unwrap();
        assert_eq!(common::canonical(got.group_of()), best, "sizes {sizes:?}");
    }
}

#[test]
fn noisy_blocks_match_brute_force() {
    let mut r = common::rng(32);
    let mut matches = 0;
    for _ in 0..100 {
        let n = r.random_range(6..=10);
        let k = r.random_range(2..=3);
        let (s, _) = common::noisy_blocks(&mut r, n, k, 1.6, 0.4, 0.35);
        let (best, _) = common::brute_force(&s, k, GROUPING_EPS);
        let got = spectral_cluster(&sim(&s), k, 3).unwrap();
        matches += usize::from(common::canonical(got.group_of()) == best);
    }
    assert!(matches >= 95, "{matches} of 100");
}

#[test]
fn single_group_and_singletons() {
    let s = sim(&block_diagonal(&[2, 3]));
    assert_eq!(spectral_cluster(&s, 1, 0).unwrap().group_of(), &[0; 5]);
    let a = spectral_cluster(&s, 5, 0).unwrap();
    assert_eq!(a.sizes(), vec![1; 5]);
    assert!(spectral_cluster(&s, 6, 0).is_err());
    assert!(spectral_cluster(&s, 0, 0).is_err());
}

#[test]
fn clustering_is_permutation_equivariant_on_noiseless_blocks() {
    let rows = block_diagonal(&[3, 2, 4]);
    let n = rows.len();
    let base = spectral_cluster(&sim(&rows), 3, 1).unwrap();
    let mut r = common::rng(33);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
        let got = spectral_cluster(&sim(&permuted), 3, 1).unwrap();
        let expected: Vec<usize> = (0..n).map(|i| base.group_of()[perm[i]]).collect();
        assert_eq!(common::canonical(got.group_of()), common::canonical(&expected));
    }
}

#[test]
fn hand_evaluated_loss_and_uniform_case() {
    let a = GroupAssignment::new(vec![0, 0, 1, 1], 2).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if (i < 2) == (j < 2) { 2.0 } else { 0.5 }).collect()).collect();
    assert_eq!(grouping_objective(&Tensor::from_rows(&rows).unwrap(), &a, 0.0).unwrap(), -8.0);
    let uniform = Tensor::full(&[5, 5], 0.8);
    let a = GroupAssignment::new(vec![0, 1, 2, 0, 1], 3).unwrap();
    assert!((grouping_objective(&uniform, &a, 0.0).unwrap() + 3.0).abs() < 1e-12);
}

fn six_filter_instance() -> (Tensor, GroupAssignment) {
    let mut r = common::rng(34);
    let (s, truth) = common::noisy_blocks(&mut r, 6, 2, 1.5, 0.5, 0.3);
    (Tensor::from_rows(&s).unwrap(), GroupAssignment::new(truth, 2).unwrap())
}

fn loss_gradient(s: &Tensor, a: &GroupAssignment) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.param(s.clone());
    let l = grouping_loss(&mut tape, v, a, GROUPING_EPS).unwrap();
    tape.backward(l).unwrap().wrt(v)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (s, a) = six_filter_instance();
    let analytic = loss_gradient(&s, &a);
    let numerical = central_differences(|xs| grouping_objective(&xs[0], &a, GROUPING_EPS), &[s], 1e-5).unwrap();
    let report = compare(&[analytic], &numerical);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn intra_pairs_pull_down_and_inter_pairs_push_up() {
    let (s, a) = six_filter_instance();
    let g = loss_gradient(&s, &a);
    let masks = build_masks(&a);
    for i in 0..6 {
        for j in 0..6 {
            if masks.intra.at2(i, j) == 1.0 {
                assert!(g.at2(i, j) < 0.0, "intra ({i},{j}) {}", g.at2(i, j));
            } else {
                assert!(g.at2(i, j) > 0.0, "inter ({i},{j}) {}", g.at2(i, j));
            }
        }
    }
}

fn assignment() -> impl Strategy<Value = GroupAssignment> {
    (1usize..5, 5usize..10).prop_flat_map(|(k, n)| {
        prop::collection::vec(0..k, n).prop_filter_map("every group used", move |g| GroupAssignment::new(g, k).ok())
    })
}

proptest! {
    #[test]
    fn masks_are_complementary_indicators(a in assignment()) {
        let m = build_masks(&a);
        let n = a.len();
        for i in 0..n {
            for j in 0..n {
                let same = a.group_of()[i] == a.group_of()[j];
                prop_assert_eq!(m.intra.at2(i, j), f64::from(u8::from(same)));
                prop_assert_eq!(m.intra.at2(i, j) + m.inter.at2(i, j), 1.0);
            }
        }
    }

    #[test]
    fn loss_ignores_group_renaming(a in assignment(), seed in 0u64..1000) {
        let n = a.len();
        let mut r = common::rng(seed);
        let mut rows = vec![vec![2.0; n]; n];
        for i in 0..n {
            for j in 0..i {
                let v = r.random_range(0.0..2.0);
                rows[i][j] = v;
                rows[j][i] = v;
            }
        }
        let s = Tensor::from_rows(&rows).unwrap();
        let k = a.k();
        let renamed = GroupAssignment::new(a.group_of().iter().map(|g| (g + 1) % k).collect(), k).unwrap();
        let x = grouping_objective(&s, &a, GROUPING_EPS).unwrap();
        let y = grouping_objective(&s, &renamed, GROUPING_EPS).unwrap();
        prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}
