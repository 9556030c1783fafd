//! Lloyd k-means over pixel feature vectors with k-means++ seeding. Used by
//! the local extractor to partition a feature grid into cluster masks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{FeatureBlock, FeatureGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hard cap on Lloyd iterations.
pub const KMEANS_MAX_ITERS: usize = 10;

#[derive(Debug, Clone)]
pub struct KmeansOutput<T: Scalar> {
    /// Cluster label per point, each in `[0, d)`.
    pub labels: Vec<usize>,
    /// `d` binary masks over the spatial grid; exactly one is hot per pixel.
    pub masks: Vec<FeatureGrid<T>>,
    /// Sum of squared distances to assigned centroids, one entry per
    /// iteration (including the post-init assignment).
    pub inertia: Vec<f64>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// K-means over the rows of `points` (`HW × C`), returning per-point labels
/// and `d` binary masks of shape `1 × height × width`. Deterministic given
/// `seed`; empty clusters are reseeded to the point currently farthest from
/// its assigned centroid.
pub fn kmeans_features<T: Scalar>(
    points: &FeatureBlock<T>,
    d: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<KmeansOutput<T>> {
    let n = points.count();
    let c = points.dim();
    if d == 0 || d > n {
        return Err(Error::Config(format!(
            "cluster count {d} must be in [1, {n}]"
        )));
    }
    if height * width != n {
        return Err(Error::ShapeMismatch {
            context: "kmeans grid size",
            expected: vec![height, width],
            got: vec![n],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding with incremental min-distance updates.
    let mut centers: Vec<Vec<T>> = Vec::with_capacity(d);
    let first = rng.gen_range(0..n);
    centers.push(points.row(first).to_vec());
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centers[0]).as_f64())
        .collect();
    while centers.len() < d {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all remaining points coincide with a center: take the first
            // index not already chosen
            (0..n)
                .find(|&i| centers.iter().all(|cn| sq_dist(points.row(i), cn) > T::zero()))
                .unwrap_or(centers.len() % n)
        };
        centers.push(points.row(pick).to_vec());
        for i in 0..n {
            let nd = sq_dist(points.row(i), centers.last().unwrap()).as_f64();
            if nd < min_d[i] {
                min_d[i] = nd;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = Vec::new();
    for _iter in 0..KMEANS_MAX_ITERS {
        // assignment
        let mut changed = false;
        let mut total = 0.0f64;
        for i in 0..n {
            let row = points.row(i);
            let mut best = T::infinity();
            let mut best_j = 0;
            for (j, cn) in centers.iter().enumerate() {
                let dist = sq_dist(row, cn);
                if dist < best {
                    best = dist;
                    best_j = j;
                }
            }
            if labels[i] != best_j {
                labels[i] = best_j;
                changed = true;
            }
            total += best.as_f64();
        }
        inertia.push(total);
        if !changed && inertia.len() > 1 {
            break;
        }

        // update
        let mut sums = vec![vec![T::zero(); c]; d];
        let mut counts = vec![0usize; d];
        for i in 0..n {
            counts[labels[i]] += 1;
            let row = points.row(i);
            for (s, &v) in sums[labels[i]].iter_mut().zip(row) {
                *s += v;
            }
        }
        for j in 0..d {
            if counts[j] == 0 {
                // reseed to the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &centers[labels[a]]);
                        let db = sq_dist(points.row(b), &centers[labels[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[j] = points.row(far).to_vec();
                labels[far] = j;
            } else {
                let inv = T::one() / T::of_usize(counts[j]);
                for (cv, &s) in centers[j].iter_mut().zip(sums[j].iter()) {
                    *cv = s * inv;
                }
            }
        }
    }

    let mut masks = Vec::with_capacity(d);
    for j in 0..d {
        let data: Vec<T> = labels
            .iter()
            .map(|&l| if l == j { T::one() } else { T::zero() })
            .collect();
        masks.push(FeatureGrid::new(1, height, width, data)?);
    }
    Ok(KmeansOutput {
        labels,
        masks,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_separated_pairs_form_clusters() {
        let pts = FeatureBlock::new(
            4,
            2,
            vec![0.0, 0.0, 0.0, 1.0, 10.0, 10.0, 10.0, 11.0],
        )
        .unwrap();
        let out = kmeans_features(&pts, 2, 1, 4, 42).unwrap();
        assert_eq!(out.labels[0], out.labels[1]);
        assert_eq!(out.labels[2], out.labels[3]);
        assert_ne!(out.labels[0], out.labels[2]);
    }

    #[test]
    fn d_equals_points_gives_zero_inertia() {
        let pts = FeatureBlock::new(3, 1, vec![0.0, 5.0, 9.0]).unwrap();
        let out = kmeans_features(&pts, 3, 1, 3, 7).unwrap();
        assert_eq!(*out.inertia.last().unwrap(), 0.0);
        let mut sorted = out.labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn masks_partition_grid() {
        let pts = FeatureBlock::new(6, 1, vec![0.0, 0.1, 0.2, 9.0, 9.1, 9.2]).unwrap();
        let out = kmeans_features(&pts, 2, 2, 3, 1).unwrap();
        for p in 0..6 {
            let hot: f64 = out.masks.iter().map(|m| m.data()[p]).sum();
            assert_eq!(hot, 1.0);
        }
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let pts = FeatureBlock::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(kmeans_features(&pts, 3, 1, 2, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let data: Vec<f64> = (0..32).map(|i| ((i * 37) % 17) as f64).collect();
        let pts = FeatureBlock::new(16, 2, data).unwrap();
        let a = kmeans_features(&pts, 4, 4, 4, 99).unwrap();
        let b = kmeans_features(&pts, 4, 4, 4, 99).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }
}
