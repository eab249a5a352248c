//! Seeded Lloyd k-means with k-means++ seeding and restarts.
//!
//! Ties in the assignment step go to the lowest-index centroid. A cluster
//! that empties is refilled with the point of the largest cluster that lies
//! farthest from its centroid, so every cluster ends non-empty whenever
//! `k <= points`.

use rand::Rng;

use crate::rng::substream;

pub const KMEANS_RESTARTS: usize = 10;
const MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOutcome {
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub restart: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| dist2(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cumulative = 0.0;
            d.iter()
                .position(|&di| {
                    cumulative += di;
                    di > 0.0 && cumulative > target
                })
                .or_else(|| d.iter().rposition(|&di| di > 0.0))
                .expect("positive total distance")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn recompute(points: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let dim = points[0].len();
    let mut counts = vec![0usize; centroids.len()];
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for ((c, s), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
        if count > 0 {
            *c = s.into_iter().map(|v| v / count as f64).collect();
        }
    }
    counts
}

/// Moves farthest points out of the largest clusters until none is empty.
/// Returns whether anything moved.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let mut moved = false;
    loop {
        let mut counts = vec![0usize; centroids.len()];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moved;
        };
        let largest = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("at least one cluster");
        if counts[largest] < 2 {
            return moved;
        }
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = dist2(p, &centroids[largest]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        labels[far.0] = empty;
        centroids[empty] = points[far.0].clone();
        recompute(points, labels, centroids);
        moved = true;
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        recompute(points, &labels, &mut centroids);
        let repaired = repair_empty(points, &mut labels, &mut centroids);
        if !changed && !repaired {
            break;
        }
    }
    repair_empty(points, &mut labels, &mut centroids);
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centroids[l]))
        .sum();
    (labels, inertia)
}

/// Best of `restarts` seeded runs by inertia; earlier restarts win ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> KMeansOutcome {
    assert!(k >= 1 && k <= points.len(), "k-means needs 1 <= k <= points");
    let mut best: Option<KMeansOutcome> = None;
    for r in 0..restarts.max(1) {
        let mut rng = substream(seed, "kmeans", r as u64);
        let (labels, inertia) = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansOutcome {
                labels,
                inertia,
                restart: r,
            });
        }
    }
    best.expect("at least one restart")
}
