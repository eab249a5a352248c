//! Filter grouping: spectral partitioning of the similarity matrix, the
//! intra/inter masks it induces, and the disentanglement loss.
//!
//! The loss is a sum over groups of intra-to-inter similarity ratios, where
//! both terms are masked means:
//!
//! ```text
//! L_g = - sum_k  mean{ s_ij : i, j in A_k } / ( mean{ s_ij : i in A_k, j not in A_k } + eps_g )
//! ```
//!
//! Diagonal pairs count as intra pairs. With a single group there are no
//! inter pairs and `L_g = -mean{ s_ij }`. Masks are constants: no gradient
//! flows through the clustering itself.

mod kmeans;
mod spectral;

pub use kmeans::{kmeans, KMeansOutcome, KMEANS_RESTARTS};
pub use spectral::{spectral_cluster, spectral_embedding};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizer in the ratio denominator.
pub const GROUPING_EPS: f64 = 1e-6;

/// Partition of the filters `0..C_l` into `k` non-empty groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    group_of: Vec<usize>,
    k: usize,
}

impl GroupAssignment {
    pub fn new(group_of: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("a grouping needs at least one group".into()));
        }
        if let Some(&bad) = group_of.iter().find(|&&g| g >= k) {
            return Err(Error::Invalid(format!("group id {bad} outside [0, {k})")));
        }
        let mut seen = vec![false; k];
        group_of.iter().for_each(|&g| seen[g] = true);
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!("group {empty} of {k} is empty")));
        }
        Ok(Self { group_of, k })
    }

    /// Every filter in group 0.
    pub fn single(filters: usize) -> Self {
        Self {
            group_of: vec![0; filters],
            k: 1,
        }
    }

    /// Contiguous, near-equal blocks: filter `j` goes to group `j * k / C_l`.
    pub fn contiguous(filters: usize, k: usize) -> Result<Self> {
        if k == 0 || k > filters {
            return Err(Error::Invalid(format!("cannot split {filters} filters into {k} groups")));
        }
        Self::new((0..filters).map(|j| j * k / filters).collect(), k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    /// Filters of `group`, ascending.
    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&i| self.group_of[i] == group)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.group_of.iter().for_each(|&g| sizes[g] += 1);
        sizes
    }

    /// Renames groups in order of first appearance, so equal partitions
    /// compare equal regardless of their original ids.
    pub fn canonical(&self) -> Self {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        let group_of = self
            .group_of
            .iter()
            .map(|&g| {
                if map[g] == usize::MAX {
                    map[g] = next;
                    next += 1;
                }
                map[g]
            })
            .collect();
        Self { group_of, k: self.k }
    }

    /// Renames this assignment's groups to overlap `previous` as much as
    /// possible (greedy maximum overlap, lowest ids on ties). Returns `self`
    /// unchanged if the two are not comparable.
    pub fn aligned_to(&self, previous: &GroupAssignment) -> Self {
        if previous.k != self.k || previous.len() != self.len() {
            return self.clone();
        }
        let k = self.k;
        let mut overlap = vec![vec![0usize; k]; k];
        for (&a, &b) in self.group_of.iter().zip(&previous.group_of) {
            overlap[a][b] += 1;
        }
        let mut rename = vec![usize::MAX; k];
        let mut taken = vec![false; k];
        for _ in 0..k {
            let mut best: Option<(usize, usize, usize)> = None;
            for (a, row) in overlap.iter().enumerate() {
                if rename[a] != usize::MAX {
                    continue;
                }
                for (b, &count) in row.iter().enumerate() {
                    if taken[b] {
                        continue;
                    }
                    if best.is_none_or(|(_, _, c)| count > c) {
                        best = Some((a, b, count));
                    }
                }
            }
            let (a, b, _) = best.expect("unmatched group remains");
            rename[a] = b;
            taken[b] = true;
        }
        Self {
            group_of: self.group_of.iter().map(|&g| rename[g]).collect(),
            k,
        }
    }
}

/// Same-group and cross-group indicator matrices (`0.0` / `1.0`).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMasks {
    pub intra: Tensor,
    pub inter: Tensor,
}

pub fn build_masks(a: &GroupAssignment) -> GroupMasks {
    let n = a.len();
    let g = a.group_of();
    let mut intra = Tensor::zeros(&[n, n]);
    let mut inter = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if g[i] == g[j] {
                intra.data_mut()[i * n + j] = 1.0;
            } else {
                inter.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    GroupMasks { intra, inter }
}

fn check_square(tape: &Tape, s: Var, filters: usize) -> Result<()> {
    let shape = tape.value(s).shape();
    if shape != [filters, filters] {
        return Err(Error::Shape {
            op: "grouping_loss",
            lhs: shape.to_vec(),
            rhs: vec![filters, filters],
        });
    }
    Ok(())
}

fn masked_mean(tape: &mut Tape, s: Var, mask: Tensor) -> Result<Var> {
    let count: f64 = mask.data().iter().sum();
    let m = tape.constant(mask);
    let picked = tape.mul(s, m)?;
    let total = tape.sum(picked);
    Ok(tape.mul_scalar(total, 1.0 / count))
}

/// Differentiable disentanglement loss of similarity matrix `s` under `a`.
pub fn grouping_loss(tape: &mut Tape, s: Var, a: &GroupAssignment, eps: f64) -> Result<Var> {
    let n = a.len();
    check_square(tape, s, n)?;
    let g = a.group_of();
    let mut ratios = Vec::with_capacity(a.k());
    for k in 0..a.k() {
        let mut intra = Tensor::zeros(&[n, n]);
        let mut inter = Tensor::zeros(&[n, n]);
        for i in (0..n).filter(|&i| g[i] == k) {
            for j in 0..n {
                let m = if g[j] == k { &mut intra } else { &mut inter };
                m.data_mut()[i * n + j] = 1.0;
            }
        }
        let intra_mean = masked_mean(tape, s, intra)?;
        if a.k() == 1 {
            return Ok(tape.neg(intra_mean));
        }
        let inter_mean = masked_mean(tape, s, inter)?;
        let denom = tape.add_scalar(inter_mean, eps);
        ratios.push(tape.div(intra_mean, denom)?);
    }
    let mut total = ratios[0];
    for &r in &ratios[1..] {
        total = tape.add(total, r)?;
    }
    Ok(tape.neg(total))
}

/// Value of [`grouping_loss`] for a concrete matrix.
pub fn grouping_objective(s: &Tensor, a: &GroupAssignment, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let loss = grouping_loss(&mut tape, sv, a, eps)?;
    tape.value(loss).item()
}

/// Mean similarity over distinct same-group pairs minus mean similarity over
/// cross-group pairs. An empty pair set contributes a mean of zero.
pub fn disentanglement_gap(s: &Tensor, a: &GroupAssignment) -> f64 {
    let n = a.len();
    let g = a.group_of();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if g[i] == g[j] {
                intra += s.at2(i, j);
                n_intra += 1;
            } else {
                inter += s.at2(i, j);
                n_inter += 1;
            }
        }
    }
    let mean = |total: f64, count: usize| if count == 0 { 0.0 } else { total / count as f64 };
    mean(intra, n_intra) - mean(inter, n_inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_validation() {
        assert!(GroupAssignment::new(vec![0, 1, 1], 2).is_ok());
        assert!(GroupAssignment::new(vec![0, 0, 0], 2).is_err());
        assert!(GroupAssignment::new(vec![0, 2], 2).is_err());
        assert_eq!(GroupAssignment::contiguous(8, 3).unwrap().sizes(), vec![3, 3, 2]);
    }

    #[test]
    fn masks_from_small_assignment() {
        let a = GroupAssignment::new(vec![0, 0, 1], 2).unwrap();
        let m = build_masks(&a);
        let ones = |t: &Tensor| -> Vec<(usize, usize)> {
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .filter(|&(i, j)| t.at2(i, j) == 1.0)
                .collect()
        };
        assert_eq!(ones(&m.intra), vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]);
        assert_eq!(ones(&m.inter), vec![(0, 2), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn single_group_has_no_inter_pairs() {
        let m = build_masks(&GroupAssignment::single(4));
        assert!(m.inter.data().iter().all(|&v| v == 0.0));
        assert!(m.intra.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hand_evaluated_two_group_loss() {
        let n = 4;
        let a = GroupAssignment::new(vec![0, 0, 1, 1], 2).unwrap();
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                s.data_mut()[i * n + j] = if (i < 2) == (j < 2) { 2.0 } else { 0.5 };
            }
        }
        assert_eq!(grouping_objective(&s, &a, 0.0).unwrap(), -8.0);
    }

    #[test]
    fn uniform_similarity_gives_minus_k() {
        let s = Tensor::full(&[6, 6], 1.3);
        for (groups, k) in [(vec![0, 0, 1, 1, 2, 2], 3), (vec![0, 1, 0, 1, 0, 1], 2)] {
            let a = GroupAssignment::new(groups, k).unwrap();
            let v = grouping_objective(&s, &a, 0.0).unwrap();
            assert!((v + k as f64).abs() < 1e-12, "{v}");
        }
        let v = grouping_objective(&s, &GroupAssignment::single(6), 0.0).unwrap();
        assert!((v + 1.3).abs() < 1e-12);
    }

    #[test]
    fn canonical_and_alignment() {
        let a = GroupAssignment::new(vec![2, 2, 0, 1], 3).unwrap();
        assert_eq!(a.canonical().group_of(), &[0, 0, 1, 2]);
        let prev = GroupAssignment::new(vec![1, 1, 2, 0], 3).unwrap();
        assert_eq!(a.aligned_to(&prev).group_of(), prev.group_of());
    }

    #[test]
    fn gap_of_block_matrix() {
        let a = GroupAssignment::new(vec![0, 0, 1, 1], 2).unwrap();
        let s = Tensor::from_rows(&[
            vec![2.0, 1.8, 0.4, 0.2],
            vec![1.8, 2.0, 0.2, 0.4],
            vec![0.4, 0.2, 2.0, 1.6],
            vec![0.2, 0.4, 1.6, 2.0],
        ])
        .unwrap();
        assert!((disentanglement_gap(&s, &a) - (1.7 - 0.3)).abs() < 1e-12);
    }
}
