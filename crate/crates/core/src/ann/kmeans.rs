//! Seeded k-means (k-means++ initialization, Lloyd iterations).
//!
//! Parallel work is split into fixed-size chunks whose partial results are
//! combined in chunk order, so output is identical for any worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::squared_l2;

const CHUNK: usize = 1024;

/// Result of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    /// Cluster of every input point under the final centroids.
    pub assignments: Vec<usize>,
    /// Total squared error after each assignment step (`iters + 1` entries).
    pub inertia: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Nearest centroid under squared L2, smallest index on ties.
pub fn nearest_centroid(centroids: &[f64], dim: usize, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(centroid, point);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let parts: Vec<(Vec<usize>, Vec<f64>)> = points
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            chunk
                .chunks_exact(dim)
                .map(|p| nearest_centroid(centroids, dim, p))
                .unzip()
        })
        .collect();
    let mut labels = Vec::with_capacity(points.len() / dim);
    let mut dists = Vec::with_capacity(points.len() / dim);
    for (l, d) in parts {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n as u64) as usize;
    chosen[first] = true;
    let mut centroids = point(first).to_vec();
    let mut min_d2: Vec<f64> = points
        .par_chunks(dim)
        .map(|p| squared_l2(p, point(first)))
        .collect();
    while centroids.len() / dim < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in min_d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the running sum
            pick.unwrap_or_else(|| min_d2.iter().rposition(|d| *d > 0.0).expect("total > 0"))
        } else {
            // every point coincides with a center: take the first unused one
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[next] = true;
        let c = point(next).to_vec();
        min_d2
            .par_chunks_mut(CHUNK)
            .zip(points.par_chunks(CHUNK * dim))
            .for_each(|(ds, ps)| {
                for (d, p) in ds.iter_mut().zip(ps.chunks_exact(dim)) {
                    *d = d.min(squared_l2(p, &c));
                }
            });
        centroids.extend(c);
    }
    centroids
}

/// Clusters `points` (`n x dim`, row-major) into `k` groups.
///
/// Initialization is k-means++; each Lloyd iteration assigns points then
/// moves centroids to cluster means. A cluster left empty is re-seeded at the
/// point farthest from its centroid (smallest index on ties).
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::param("points must be a whole number of rows"));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if k > n {
        return Err(Error::param(format!("k = {k} exceeds the {n} points available")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut inertia = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (labels, dists) = assign(points, dim, &centroids);
        inertia.push(dists.iter().sum());
        update(points, dim, k, &labels, &dists, &mut centroids);
    }
    let (assignments, dists) = assign(points, dim, &centroids);
    inertia.push(dists.iter().sum());
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        inertia,
    })
}

fn update(points: &[f64], dim: usize, k: usize, labels: &[usize], dists: &[f64], centroids: &mut [f64]) {
    let parts: Vec<(Vec<f64>, Vec<usize>)> = points
        .par_chunks(CHUNK * dim)
        .zip(labels.par_chunks(CHUNK))
        .map(|(ps, ls)| {
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            for (p, &l) in ps.chunks_exact(dim).zip(ls) {
                counts[l] += 1;
                for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                    *s += x;
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (s, c) in parts {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    let mut taken = vec![false; dists.len()];
    for c in 0..k {
        let target = &mut centroids[c * dim..(c + 1) * dim];
        if counts[c] > 0 {
            for (t, s) in target.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *t = s / counts[c] as f64;
            }
        } else {
            let mut far: Option<usize> = None;
            for (i, d) in dists.iter().enumerate() {
                if !taken[i] && far.is_none_or(|f| *d > dists[f]) {
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                target.copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim)
            .map(|i| rng.random::<f64>() * 4.0 + ((i / dim) % 5) as f64 * 3.0)
            .collect()
    }

    #[test]
    fn k_one_is_the_mean() {
        let pts = cloud(101, 3, 1);
        let km = kmeans(&pts, 3, 1, 5, 9).unwrap();
        for j in 0..3 {
            let mean: f64 = pts.chunks_exact(3).map(|p| p[j]).sum::<f64>() / 101.0;
            assert!((km.centroids[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn two_points_two_clusters() {
        let pts = [0.0, 1.0, 5.0, -2.0];
        let km = kmeans(&pts, 2, 2, 10, 3).unwrap();
        let mut cs: Vec<Vec<f64>> = km.centroids.chunks(2).map(|c| c.to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 1.0], vec![5.0, -2.0]]);
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn k_exceeding_points_is_rejected() {
        assert!(matches!(kmeans(&[1.0, 2.0], 1, 3, 1, 0), Err(Error::Parameter(_))));
        assert!(kmeans(&[1.0, 2.0], 1, 0, 1, 0).is_err());
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let pts = cloud(12, 2, 5);
        let km = kmeans(&pts, 2, 12, 4, 1).unwrap();
        let mut sizes = [0; 12];
        for a in &km.assignments {
            sizes[*a] += 1;
        }
        assert!(sizes.iter().all(|s| *s == 1));
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..5 {
            let pts = cloud(3000, 4, seed);
            let km = kmeans(&pts, 4, 17, 12, seed).unwrap();
            for w in km.inertia.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.inertia);
            }
        }
    }

    #[test]
    fn duplicate_points_reseed_without_panicking() {
        let pts = vec![1.0; 20];
        let km = kmeans(&pts, 2, 4, 3, 0).unwrap();
        assert_eq!(km.k(), 4);
        assert!(km.centroids.iter().all(|c| *c == 1.0));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let pts = cloud(5000, 3, 2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| kmeans(&pts, 3, 9, 8, 77).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert_eq!(a, kmeans(&pts, 3, 9, 8, 77).unwrap());
    }
}
