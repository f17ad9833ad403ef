//! Seeded Lloyd's k-means with k-means++ initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const DEFAULT_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per point.
    pub assignment: Vec<u32>,
    /// `k * dim` centroid coordinates, row-major.
    pub centroids: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &a in &self.assignment {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lower index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// centroid, the lowest-index point not yet chosen is taken.
fn seed_centroids(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let mut rng = rng_from(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = points[first * dim..(first + 1) * dim].to_vec();
    let mut min_d: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();

    while centroids.len() < k * dim {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the cumulative sum just short of `target`.
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = &points[next * dim..(next + 1) * dim];
        centroids.extend_from_slice(c);
        for (i, p) in points.chunks_exact(dim).enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, c));
        }
    }
    centroids
}

/// Clusters `points` (row-major, `dim` columns) into `k` groups.
///
/// Iterates until assignments stop changing or `max_iterations` is reached.
/// Empty clusters keep their previous centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, max_iterations: usize, seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "{} coordinates do not form points of dimension {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n} points")));
    }

    let mut centroids = seed_centroids(points, dim, k, seed);
    let mut assignment: Vec<u32> = points
        .chunks_exact(dim)
        .map(|p| nearest(p, &centroids, dim).0 as u32)
        .collect();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iterations {
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks_exact(dim).zip(&assignment) {
            let a = a as usize;
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        let next: Vec<u32> = points
            .chunks_exact(dim)
            .map(|p| nearest(p, &centroids, dim).0 as u32)
            .collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }

    Ok(KMeansResult {
        assignment,
        centroids,
        iterations,
        converged,
    })
}

/// Standardizes each column to zero mean and unit variance. Constant columns become zero.
pub fn z_normalize(points: &mut [f64], dim: usize) {
    let n = points.len() / dim;
    if n == 0 {
        return;
    }
    for d in 0..dim {
        let mean = (0..n).map(|i| points[i * dim + d]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (points[i * dim + d] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let v = &mut points[i * dim + d];
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let jitter = i as f64 * 0.01;
            pts.extend([0.0 + jitter, 0.0]);
            pts.extend([10.0 + jitter, 10.0]);
        }
        let r = kmeans(&pts, 2, 2, 100, 3).unwrap();
        assert!(r.converged);
        for i in 0..20 {
            assert_eq!(r.assignment[2 * i], r.assignment[0]);
            assert_eq!(r.assignment[2 * i + 1], r.assignment[1]);
        }
        assert_ne!(r.assignment[0], r.assignment[1]);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let pts: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let a = kmeans(&pts, 3, 5, 100, 11).unwrap();
        let b = kmeans(&pts, 3, 5, 100, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_clusters_for_distinct_points() {
        let pts: Vec<f64> = (0..12).map(|i| (i * i) as f64).collect();
        let r = kmeans(&pts, 1, 12, 100, 0).unwrap();
        let mut seen = r.assignment.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn identical_points_collapse_to_first_cluster() {
        let pts = vec![1.0; 20];
        let r = kmeans(&pts, 2, 4, 100, 9).unwrap();
        assert!(r.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn rejects_bad_k() {
        assert!(kmeans(&[0.0, 1.0], 1, 3, 10, 0).is_err());
        assert!(kmeans(&[0.0, 1.0], 1, 0, 10, 0).is_err());
    }

    #[test]
    fn z_normalize_standardizes_columns() {
        let mut pts = vec![1.0, 5.0, 3.0, 5.0];
        z_normalize(&mut pts, 2);
        assert_eq!(pts, vec![-1.0, 0.0, 1.0, 0.0]);
    }
}
