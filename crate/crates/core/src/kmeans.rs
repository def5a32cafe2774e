//! Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic for a fixed seed: seeding draws from a ChaCha8 stream, assignment ties go to the
//! lowest centroid index, and a cluster that empties out is re-seeded with the point farthest
//! from its current centroid so exactly `k` clusters always come back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("need at least k = {k} points, got {points}")]
    TooFewPoints { k: usize, points: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("points must be non-empty finite vectors")]
    InvalidPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Indices into the input point list, ascending.
    pub members: Vec<usize>,
    /// Arithmetic mean of the members.
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    /// Cluster index for each input point.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared distances to assigned centroids after each iteration.
    pub objective_history: Vec<f64>,
}

impl Clustering {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

pub fn kmeans_cluster(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Clustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if max_iters == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints {
            k,
            points: points.len(),
        });
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.is_empty() || p.iter().any(|x| !x.is_finite()) {
            return Err(ClusterError::InvalidPoint);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut objective_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(p, &centroids).0;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        repair_empty_clusters(points, &mut centroids, &mut assignments);
        centroids = member_means(points, &assignments, k, dim);
        objective_history.push(objective(points, &centroids, &assignments));
        if !changed {
            converged = true;
            break;
        }
    }

    let clusters = (0..k)
        .map(|c| Cluster {
            members: (0..points.len()).filter(|&i| assignments[i] == c).collect(),
            centroid: centroids[c].clone(),
        })
        .collect();
    Ok(Clustering {
        clusters,
        assignments,
        iterations,
        converged,
        objective_history,
    })
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| vector::squared_distance(p, &points[first]))
        .collect();

    while centroids.len() < k {
        let total: f64 = dist2
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| !c)
            .map(|(d, _)| d)
            .sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                target -= dist2[i];
                if target < 0.0 && dist2[i] > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` marginally positive; fall back to the last candidate.
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i] && dist2[i] > 0.0).unwrap())
        } else {
            // Every remaining point duplicates a chosen centroid.
            let remaining: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            remaining[rng.random_range(0..remaining.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            dist2[i] = dist2[i].min(vector::squared_distance(p, &points[pick]));
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = vector::squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves each empty cluster's centroid onto the point farthest from its own centroid.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = (0..k).find(|&c| counts[c] == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, vector::squared_distance(&points[i], &centroids[assignments[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if d <= bd => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = donor else {
            // n >= k guarantees a cluster with at least two members while one is empty.
            return;
        };
        centroids[empty] = points[i].clone();
        assignments[i] = empty;
    }
}

fn member_means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let n = n.max(1) as f64;
        s.iter_mut().for_each(|x| *x /= n);
    }
    sums
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| vector::squared_distance(p, &centroids[a]))
        .sum()
}
