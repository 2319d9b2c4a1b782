//! Lloyd's algorithm with k-means++ seeding, in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{bail, Result};

#[derive(Clone, Debug)]
pub struct KMeansOutcome {
    /// `k × dim` row-major centroids.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after the initial assignment and after
    /// every Lloyd step.
    pub objective_history: Vec<f64>,
}

impl KMeansOutcome {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 4;
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            let d = a[c * LANES + l] - b[c * LANES + l];
            acc[l] += d * d;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * LANES..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// k-means++: first center uniform, then each next center drawn with
/// probability proportional to the squared distance to the nearest chosen one.
pub fn kmeans_plus_plus_init<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 || points.len() % dim != 0 {
        bail!(Dimension, "{} values do not form {}-dimensional points", points.len(), dim);
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        bail!(Capacity, "k-means needs at least k={} points, got {}", k, n);
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = point(chosen).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    Ok(centroids)
}

fn assign(points: &[f64], dim: usize, centroids: &[f64], assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let k = centroids.len() / dim;
    let mut total = 0.0;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = squared_distance(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
        total += best_d;
    }
    total
}

/// Runs up to `iters` Lloyd steps from `init`, stopping early once the
/// relative objective improvement drops below `tol`. A cluster left empty by
/// an update is reseeded at the point farthest from its own centroid.
pub fn lloyd(points: &[f64], dim: usize, init: Vec<f64>, iters: usize, tol: f64) -> KMeansOutcome {
    let n = points.len() / dim;
    let k = init.len() / dim;
    let mut centroids = init;
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = vec![assign(points, dim, &centroids, &mut assignments, &mut dists)];
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // farthest point from its (updated) centroid, among clusters that can spare it
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.chunks_exact(dim).enumerate() {
                let a = assignments[i];
                if counts[a] <= 1 {
                    continue;
                }
                let d = squared_distance(p, &centroids[a * dim..(a + 1) * dim]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
        let prev = *history.last().expect("non-empty");
        let obj = assign(points, dim, &centroids, &mut assignments, &mut dists);
        history.push(obj);
        if prev <= 0.0 || (prev - obj) / prev < tol {
            break;
        }
    }
    KMeansOutcome {
        centroids,
        assignments,
        objective_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};

    /// Textbook Lloyd iteration written independently: assign, then average.
    fn plain_lloyd_objective(points: &[[f64; 2]], mut centers: Vec<[f64; 2]>, steps: usize) -> f64 {
        let nearest = |p: &[f64; 2], centers: &[[f64; 2]]| {
            let mut best = (0, f64::INFINITY);
            for (c, q) in centers.iter().enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        };
        for _ in 0..steps {
            let mut sum = vec![[0.0, 0.0]; centers.len()];
            let mut cnt = vec![0.0; centers.len()];
            for p in points {
                let (c, _) = nearest(p, &centers);
                sum[c][0] += p[0];
                sum[c][1] += p[1];
                cnt[c] += 1.0;
            }
            for c in 0..centers.len() {
                assert!(cnt[c] > 0.0, "oracle does not handle empty clusters");
                centers[c] = [sum[c][0] / cnt[c], sum[c][1] / cnt[c]];
            }
        }
        points.iter().map(|p| nearest(p, &centers).1).sum()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n * dim).map(|_| normal(&mut rng)).collect()
    }

    #[test]
    fn matches_plain_lloyd_from_shared_init() {
        let flat = random_points(200, 2, 42);
        let points: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
        let init = kmeans_plus_plus_init(&flat, 2, 4, &mut seeded(7)).unwrap();
        let steps = 10;
        let ours = lloyd(&flat, 2, init.clone(), steps, 0.0);
        let centers = init.chunks(2).map(|c| [c[0], c[1]]).collect();
        let oracle = plain_lloyd_objective(&points, centers, ours.objective_history.len() - 1);
        assert!((ours.objective() - oracle).abs() < 1e-6, "{} vs {}", ours.objective(), oracle);
    }

    #[test]
    fn objective_is_monotone() {
        for seed in 0..20 {
            let dim = 3 + seed as usize % 4;
            let pts = random_points(150, dim, 100 + seed);
            let init = kmeans_plus_plus_init(&pts, dim, 6, &mut seeded(seed)).unwrap();
            let out = lloyd(&pts, dim, init, 25, 0.0);
            for w in out.objective_history.windows(2) {
                assert!(w[1] <= w[0], "seed {}: {:?}", seed, out.objective_history);
            }
        }
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // two duplicated centroids: one must end up empty and be reseeded
        let pts = vec![0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0];
        let init = vec![0.0, 0.0, 0.0, 0.0];
        let out = lloyd(&pts, 2, init, 5, 0.0);
        let mut used = out.assignments.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 2);
        assert!(out.objective() < 0.05);
    }

    #[test]
    fn too_few_points() {
        assert!(kmeans_plus_plus_init(&[0.0, 1.0], 1, 3, &mut seeded(0)).is_err());
    }
}
