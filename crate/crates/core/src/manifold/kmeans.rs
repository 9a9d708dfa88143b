//! K-means clustering of embeddings and the embedding-dimension partition
//! used by the divide-and-conquer trainer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, CoreResult};
use crate::rng::derive_rng;
use crate::tensor::{Scalar, Tensor};

pub const KMEANS_MAX_ITERS: usize = 100;

/// Contiguous, equal-length index ranges `[start, end)` covering `[0, d)`.
pub fn split_dims(d: usize, k: usize) -> CoreResult<Vec<(usize, usize)>> {
    ensure!(k > 0, InvalidConfig, "K must be positive");
    ensure!(
        d % k == 0,
        InvalidConfig,
        "K = {k} does not divide the embedding dimension d = {d}"
    );
    let step = d / k;
    Ok((0..k).map(|i| (i * step, (i + 1) * step)).collect())
}

/// A cluster assignment together with the dimension slices: cluster `c`
/// trains on `dim_slices[c]`.
#[derive(Clone, Debug)]
pub struct SubspacePartition {
    pub k: usize,
    pub dim_slices: Vec<(usize, usize)>,
    /// Cluster index (0-based) per training sample, aligned with dataset
    /// order.
    pub cluster_of: Vec<usize>,
}

impl SubspacePartition {
    pub fn trivial(d: usize, n: usize) -> Self {
        SubspacePartition {
            k: 1,
            dim_slices: vec![(0, d)],
            cluster_of: vec![0; n],
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in &self.cluster_of {
            sizes[c] += 1;
        }
        sizes
    }

    /// Sample indices belonging to each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &c) in self.cluster_of.iter().enumerate() {
            m[c].push(i);
        }
        m
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ seeding, at most [`KMEANS_MAX_ITERS`]
/// iterations, deterministic for a fixed seed. Every returned cluster is
/// nonempty: a cluster that empties is re-seeded from the point farthest
/// from its current centroid.
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, seed: u64) -> CoreResult<Vec<usize>> {
    let s = points.shape();
    ensure!(s.len() == 2, ShapeMismatch, "kmeans expects [n, d] points, got {s:?}");
    let (n, d) = (s[0], s[1]);
    ensure!(k >= 1, InvalidConfig, "K must be at least 1");
    ensure!(k <= n, InvalidConfig, "K = {k} exceeds the number of samples {n}");

    let pts: Vec<f64> = points.data().iter().map(|&v| v.to_f64()).collect();
    let row = |i: usize| &pts[i * d..(i + 1) * d];

    if k == 1 {
        return Ok(vec![0; n]);
    }

    let mut rng = derive_rng(seed, "kmeans", 0);

    // k-means++ seeding
    let mut centroids = vec![0.0f64; k * d];
    let first = rng.gen_range(0..n);
    centroids[..d].copy_from_slice(row(first));
    let mut best = vec![f64::INFINITY; n];
    for c in 1..k {
        for i in 0..n {
            let dd = dist2(row(i), &centroids[(c - 1) * d..c * d]);
            if dd < best[i] {
                best[i] = dd;
            }
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids[c * d..(c + 1) * d].copy_from_slice(row(pick));
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        // assignment step; ties resolve to the lowest cluster index
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = dist2(row(i), &centroids[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best_c = c;
                }
            }
            if assign[i] != best_c {
                assign[i] = best_c;
                changed = true;
            }
        }

        // update step
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * d];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (sj, xj) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *sj += *xj;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid becomes the centroid
                let mut far_i = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let a = assign[i];
                    let dd = dist2(row(i), &centroids[a * d..(a + 1) * d]);
                    if dd > far_d {
                        far_d = dd;
                        far_i = i;
                    }
                }
                centroids[c * d..(c + 1) * d].copy_from_slice(row(far_i));
                reseeded = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (cj, sj) in centroids[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(&sums[c * d..(c + 1) * d])
                {
                    *cj = *sj * inv;
                }
            }
        }

        if !changed && !reseeded {
            break;
        }
    }

    // final tie-safe assignment to the converged centroids
    for i in 0..n {
        let mut best_c = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dd = dist2(row(i), &centroids[c * d..(c + 1) * d]);
            if dd < best_d {
                best_d = dd;
                best_c = c;
            }
        }
        assign[i] = best_c;
    }

    // guarantee nonempty clusters even if the loop exited right after a reseed
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            // farthest point whose cluster can spare a member
            let donor = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&i, &j| {
                    let di = dist2(row(i), &centroids[assign[i] * d..assign[i] * d + d]);
                    let dj = dist2(row(j), &centroids[assign[j] * d..assign[j] * d + d]);
                    di.partial_cmp(&dj).unwrap()
                })
                .unwrap();
            counts[assign[donor]] -= 1;
            assign[donor] = c;
            counts[c] = 1;
        }
    }

    Ok(assign)
}

/// K-means assignment of per-sample embeddings, the clustering step of the
/// divide-and-conquer schedule.
pub fn cluster_embeddings<T: Scalar>(
    embeddings: &Tensor<T>,
    k: usize,
    seed: u64,
) -> CoreResult<Vec<usize>> {
    kmeans(embeddings, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn split_dims_partitions_the_embedding() {
        for k in [1usize, 2, 4] {
            let slices = split_dims(128, k).unwrap();
            assert_eq!(slices.len(), k);
            // equal lengths, disjoint, covering [0, 128)
            let mut cursor = 0;
            for &(s, e) in &slices {
                assert_eq!(s, cursor);
                assert_eq!(e - s, 128 / k);
                cursor = e;
            }
            assert_eq!(cursor, 128);
        }
        assert!(split_dims(128, 3).is_err());
        assert!(split_dims(128, 0).is_err());
    }

    #[test]
    fn two_blobs_separate_cleanly() {
        let mut rng = derive_rng(91, "blobs", 0);
        let n = 40;
        let mut pts = Tensor::<f64>::randn(&[n, 3], 0.1, &mut rng);
        for i in 0..n {
            let off = if i < n / 2 { -3.0 } else { 3.0 };
            pts.data_mut()[i * 3] += off;
        }
        let assign = kmeans(&pts, 2, 7).unwrap();
        // cluster ids may be swapped; check consistency with blob identity
        let a0 = assign[0];
        for i in 0..n {
            if i < n / 2 {
                assert_eq!(assign[i], a0);
            } else {
                assert_ne!(assign[i], a0);
            }
        }
        // brute-force nearest-centroid verification
        let mut cents = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..3 {
                cents[assign[i]][j] += pts.data()[i * 3 + j];
            }
        }
        for c in 0..2 {
            for j in 0..3 {
                cents[c][j] /= counts[c] as f64;
            }
        }
        for i in 0..n {
            let d0 = dist2(&pts.data()[i * 3..i * 3 + 3], &cents[0]);
            let d1 = dist2(&pts.data()[i * 3..i * 3 + 3], &cents[1]);
            let nearest = if d0 <= d1 { 0 } else { 1 };
            assert_eq!(assign[i], nearest, "sample {i} not at its nearest centroid");
        }
    }

    #[test]
    fn degenerate_k_values() {
        let mut rng = derive_rng(91, "degenerate", 0);
        let pts = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        assert_eq!(kmeans(&pts, 1, 0).unwrap(), vec![0; 5]);
        let own = kmeans(&pts, 5, 0).unwrap();
        let mut sorted = own.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5, "K=N should give every sample its own cluster");
        assert!(kmeans(&pts, 6, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed_and_nonempty_clusters() {
        let mut rng = derive_rng(92, "det", 0);
        let pts = Tensor::<f64>::randn(&[30, 4], 1.0, &mut rng);
        let a = kmeans(&pts, 4, 123).unwrap();
        let b = kmeans(&pts, 4, 123).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        for &c in &a {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn duplicate_points_still_yield_nonempty_clusters() {
        // all points identical: k-means++ degenerates, reseed logic must
        // still hand every cluster at least one member
        let pts = Tensor::<f64>::full(&[6, 2], 1.5);
        let assign = kmeans(&pts, 3, 9).unwrap();
        let mut counts = [0usize; 3];
        for &c in &assign {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    }
}
