//! Differentiable core tensor operations in their pure form (softmax
//! variants, GWAP, cosine maps) plus the non-differentiable selection
//! primitives (KNN, k-means). The tape ops in [`crate::autodiff`] share the
//! same kernels; these entry points validate domain invariants and are what
//! the oracles in the test suite check against.

mod gradcheck;
mod kmeans;

pub use gradcheck::{grad_check, probe_weights, GradCheckReport};
pub use kmeans::{kmeans_features, KmeansOutput, KMEANS_MAX_ITERS};

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::types::{FeatureBlock, FeatureGrid, FeatureVector};

/// Denominator floor for GWAP (an all-zero weight map pools to zero).
pub const GWAP_EPS: f64 = 1e-6;
/// Norm-product floor for cosine similarity (zero-norm similarity is 0).
pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel softmax across channels.
pub fn softmax_channels<T: Scalar>(grid: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    grid.tensor().ensure_finite("softmax_channels input")?;
    let data = kernels::softmax_dim0(grid.data(), grid.channels(), grid.pixels());
    FeatureGrid::new(grid.channels(), grid.height(), grid.width(), data)
}

/// Per-channel softmax across all spatial positions (soft object regions).
pub fn softmax_spatial<T: Scalar>(grid: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    grid.tensor().ensure_finite("softmax_spatial input")?;
    let data = kernels::softmax_dim1(grid.data(), grid.channels(), grid.pixels());
    FeatureGrid::new(grid.channels(), grid.height(), grid.width(), data)
}

/// Result of global weighted average pooling.
#[derive(Debug, Clone)]
pub struct GwapResult<T: Scalar> {
    pub vector: FeatureVector<T>,
    /// True when the weight mass was below the epsilon floor and the pooled
    /// vector is therefore all zeros.
    pub degenerate: bool,
}

/// Global weighted average pooling: per-channel weighted mean of `features`
/// under a non-negative `1×H×W` weight map.
pub fn gwap<T: Scalar>(
    features: &FeatureGrid<T>,
    weights: &FeatureGrid<T>,
) -> Result<GwapResult<T>> {
    if weights.channels() != 1
        || weights.height() != features.height()
        || weights.width() != features.width()
    {
        return Err(Error::ShapeMismatch {
            context: "gwap weights",
            expected: vec![1, features.height(), features.width()],
            got: vec![weights.channels(), weights.height(), weights.width()],
        });
    }
    if weights.data().iter().any(|&w| w < T::zero()) {
        return Err(Error::NonFinite("gwap weights must be non-negative"));
    }
    let eps = T::of_f64(GWAP_EPS);
    let hw = features.pixels();
    let wsum: T = weights.data().iter().copied().sum();
    let degenerate = wsum < eps;
    let denom = wsum.max(eps);
    let mut out = vec![T::zero(); features.channels()];
    for (c, item) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for p in 0..hw {
            s += features.data()[c * hw + p] * weights.data()[p];
        }
        *item = s / denom;
    }
    Ok(GwapResult {
        vector: FeatureVector::new(out)?,
        degenerate,
    })
}

/// Pixel-wise cosine similarity between a grid and a block of vectors,
/// producing a `K×H×W` correlation grid with every value in `[-1, 1]`.
pub fn cosine_map<T: Scalar>(
    grid: &FeatureGrid<T>,
    vectors: &FeatureBlock<T>,
) -> Result<FeatureGrid<T>> {
    if grid.channels() != vectors.dim() {
        return Err(Error::ShapeMismatch {
            context: "cosine_map feature dim",
            expected: vec![grid.channels()],
            got: vec![vectors.dim()],
        });
    }
    let eps = T::of_f64(COSINE_EPS);
    let (c, hw) = (grid.channels(), grid.pixels());
    let k = vectors.count();
    let mut out = vec![T::zero(); k * hw];
    let gnorm: Vec<T> = (0..hw)
        .map(|p| {
            (0..c)
                .map(|i| {
                    let v = grid.data()[i * hw + p];
                    v * v
                })
                .sum::<T>()
                .sqrt()
        })
        .collect();
    for j in 0..k {
        let row = vectors.row(j);
        let vnorm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        for p in 0..hw {
            let mut dot = T::zero();
            for (i, &rv) in row.iter().enumerate() {
                dot += grid.data()[i * hw + p] * rv;
            }
            out[j * hw + p] = dot / (gnorm[p] * vnorm).max(eps);
        }
    }
    FeatureGrid::new(k, grid.height(), grid.width(), out)
}

/// Distance metric for [`knn_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    Euclidean,
    Cosine,
}

impl Default for KnnMetric {
    fn default() -> Self {
        KnnMetric::Euclidean
    }
}

/// Indices of the `n` pool rows nearest to `query`, ascending by distance,
/// ties broken by lowest index. The selection carries no gradient.
pub fn knn_select<T: Scalar>(
    query: &[T],
    pool: &FeatureBlock<T>,
    n: usize,
    metric: KnnMetric,
) -> Result<Vec<usize>> {
    if n == 0 || n > pool.count() {
        return Err(Error::Bounds {
            name: "knn n",
            value: n,
            max: pool.count(),
        });
    }
    if query.len() != pool.dim() {
        return Err(Error::ShapeMismatch {
            context: "knn query dim",
            expected: vec![pool.dim()],
            got: vec![query.len()],
        });
    }
    let mut scored: Vec<(T, usize)> = (0..pool.count())
        .map(|i| {
            let row = pool.row(i);
            let d = match metric {
                KnnMetric::Euclidean => row
                    .iter()
                    .zip(query.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>(),
                KnnMetric::Cosine => {
                    let dot: T = row.iter().zip(query.iter()).map(|(&a, &b)| a * b).sum();
                    let na = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let nb = query.iter().map(|&v| v * v).sum::<T>().sqrt();
                    T::one() - dot / (na * nb).max(T::of_f64(COSINE_EPS))
                }
            };
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| i).collect())
}
