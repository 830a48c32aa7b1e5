//! Seeded Lloyd's K-means on flattened images.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::data::Seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Stop once no centroid moves by more than this (Euclidean).
    pub tolerance: f64,
    pub seed: Seed,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: Seed) -> Self {
        Self { k, max_iterations: 100, tolerance: 1e-6, seed }
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding driven by `seed`.
fn seed_centroids(data: ArrayView2<f64>, k: usize, seed: Seed) -> Array2<f64> {
    let n = data.nrows();
    let mut rng = seed.rng();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = data.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, p) in data.outer_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds. An empty cluster is re-seeded with
/// the point farthest from its current centroid.
pub fn kmeans(data: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeans> {
    let (n, dim) = data.dim();
    if cfg.k == 0 {
        return Err(Error::Config("K-means needs k >= 1".into()));
    }
    if n < cfg.k {
        return Err(Error::InvalidInput(format!("{n} points cannot form {} clusters", cfg.k)));
    }
    let mut centroids = seed_centroids(data, cfg.k, cfg.seed);
    let mut assignments = vec![0usize; n];
    let mut reseeded = 0;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for (i, p) in data.outer_iter().enumerate() {
            let (k, d) = nearest(p, &centroids);
            assignments[i] = k;
            dists[i] = d;
        }
        let mut sums = Array2::<f64>::zeros((cfg.k, dim));
        let mut counts = vec![0usize; cfg.k];
        for (i, p) in data.outer_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &p);
            counts[assignments[i]] += 1;
        }
        let mut next = Array2::<f64>::zeros((cfg.k, dim));
        for (k, &count) in counts.iter().enumerate() {
            if count == 0 {
                let far =
                    (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a))).expect("non-empty data");
                next.row_mut(k).assign(&data.row(far));
                dists[far] = 0.0;
                reseeded += 1;
            } else {
                next.row_mut(k).assign(&(&sums.row(k) / count as f64));
            }
        }
        let shift =
            next.outer_iter().zip(centroids.outer_iter()).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if shift <= cfg.tolerance {
            break;
        }
    }
    for (i, p) in data.outer_iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    Ok(KMeans { centroids, assignments, iterations, reseeded })
}

/// Mean of each cluster, recomputed from assignments (used by tests and reports).
pub fn cluster_means(data: ArrayView2<f64>, assignments: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, data.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &a) in data.outer_iter().zip(assignments) {
        sums.row_mut(a).scaled_add(1.0, &p);
        counts[a] += 1;
    }
    for (mut row, c) in sums.axis_iter_mut(Axis(0)).zip(counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separated_blobs_recover_their_means() {
        let mut rng = Seed(4).rng();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let centers = [[0.0, 0.0, 0.0], [5.0, 5.0, -5.0]];
        let mut data = Array2::zeros((200, 3));
        for i in 0..200 {
            for d in 0..3 {
                data[[i, d]] = centers[i % 2][d] + noise.sample(&mut rng);
            }
        }
        let km = kmeans(data.view(), &KMeansConfig::new(2, Seed(9))).unwrap();
        for blob in 0..2 {
            let members: Vec<usize> = (blob..200).step_by(2).collect();
            let truth = data.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
            let k = km.assignments[blob];
            assert!(members.iter().all(|&i| km.assignments[i] == k));
            for d in 0..3 {
                assert!((km.centroids[[k, d]] - truth[d]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn duplicate_points_still_yield_k_centroids() {
        let data = Array2::from_shape_fn((6, 2), |(i, _)| if i < 5 { 0.0 } else { 1.0 });
        let km = kmeans(data.view(), &KMeansConfig::new(3, Seed(1))).unwrap();
        assert_eq!(km.centroids.nrows(), 3);
        assert!(km.centroids.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_points_is_an_error() {
        let data = Array2::<f64>::zeros((2, 2));
        assert!(kmeans(data.view(), &KMeansConfig::new(3, Seed(1))).is_err());
    }

    #[test]
    fn seeded_runs_agree() {
        let data = Array2::from_shape_fn((50, 4), |(i, d)| ((i * 7 + d * 3) % 11) as f64);
        let a = kmeans(data.view(), &KMeansConfig::new(4, Seed(2))).unwrap();
        let b = kmeans(data.view(), &KMeansConfig::new(4, Seed(2))).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }
}
