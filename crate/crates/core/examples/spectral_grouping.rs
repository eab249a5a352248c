//! Spectral clustering of a noisy block similarity matrix, plus the grouping
//! loss of the recovered partition against a scrambled one.

use disentangled_cbm::filter_stats::SimilarityMatrix;
use disentangled_cbm::grouping::{disentanglement_gap, grouping_objective, spectral_cluster, GroupAssignment, GROUPING_EPS};
use disentangled_cbm::rng::substream;
use disentangled_cbm::{Result, Tensor};
use rand::Rng;

fn main() -> Result<()> {
    let truth = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
    let n = truth.len();
    let mut rng = substream(0, "example", 0);
    let mut rows = vec![vec![2.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let base = if truth[i] == truth[j] { 1.7 } else { 0.5 };
            let v: f64 = (base + rng.random_range(-0.25f64..0.25)).clamp(0.0, 2.0);
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    let s = SimilarityMatrix { s: Tensor::from_rows(&rows)?, epsilon: 0.0 };
    let found = spectral_cluster(&s, 3, 0)?;
    println!("planted  {truth:?}");
    println!("recovered {:?}", found.canonical().group_of());

    let scrambled = GroupAssignment::contiguous(n, 3)?;
    for (name, a) in [("recovered", &found), ("contiguous", &scrambled)] {
        println!(
            "{name:>10}: loss {:>8.4}  intra-inter gap {:.4}",
            grouping_objective(&s.s, a, GROUPING_EPS)?,
            disentanglement_gap(&s.s, a)
        );
    }
    Ok(())
}
