//! Spectral partitioning of a filter similarity matrix.
//!
//! The similarity matrix (diagonal zeroed) is the affinity `W`. With degree
//! matrix `D`, the filters are embedded by the eigenvectors of the `k`
//! smallest eigenvalues of `I - D^{-1/2} W D^{-1/2}`, each embedded row is
//! scaled to unit length, and k-means on those rows gives the groups.

use nalgebra::{DMatrix, SymmetricEigen};

use super::kmeans::{kmeans, KMEANS_RESTARTS};
use super::GroupAssignment;
use crate::error::{Error, Result};
use crate::filter_stats::SimilarityMatrix;

const EIGEN_EPS: f64 = 1e-13;
const EIGEN_MAX_ITERATIONS: usize = 100_000;

/// Unit-normalized rows of the bottom-`k` eigenvectors of the normalized
/// Laplacian of `s`.
pub fn spectral_embedding(s: &SimilarityMatrix, k: usize) -> Result<Vec<Vec<f64>>> {
    let n = s.size();
    let affinity = |i: usize, j: usize| if i == j { 0.0 } else { s.get(i, j).max(0.0) };
    let inv_sqrt_degree: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| affinity(i, j)).sum();
            if d > 1e-12 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt_degree[i] * affinity(i, j) * inv_sqrt_degree[j]
    });
    let eigen = SymmetricEigen::try_new(laplacian, EIGEN_EPS, EIGEN_MAX_ITERATIONS).ok_or(
        Error::EigenSolver {
            size: n,
            max_iterations: EIGEN_MAX_ITERATIONS,
            eps: EIGEN_EPS,
        },
    )?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .total_cmp(&eigen.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let rows = (0..n)
        .map(|i| {
            let row: Vec<f64> = order[..k].iter().map(|&c| eigen.eigenvectors[(i, c)]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.into_iter().map(|v| v / norm).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(rows)
}

/// Partitions the filters of `s` into `k` non-empty groups. Group ids are
/// canonical: numbered in order of each group's lowest filter index.
pub fn spectral_cluster(s: &SimilarityMatrix, k: usize, seed: u64) -> Result<GroupAssignment> {
    let n = s.size();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!(
            "spectral clustering needs 1 <= k <= {n} filters, got k = {k}"
        )));
    }
    if k == 1 {
        return Ok(GroupAssignment::single(n));
    }
    if k == n {
        return GroupAssignment::new((0..n).collect(), n);
    }
    let rows = spectral_embedding(s, k)?;
    let outcome = kmeans(&rows, k, seed, KMEANS_RESTARTS);
    Ok(GroupAssignment::new(outcome.labels, k)?.canonical())
}
