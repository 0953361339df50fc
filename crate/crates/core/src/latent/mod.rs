//! Dimensionality reduction, clustering and cluster bookkeeping for the latent
//! vectors of superpixel patches.

mod elbow;
mod kmeans;
mod outliers;
mod reduce;
mod summary;

pub use elbow::{elbow_scan, elbow_select, ElbowChoice, ElbowCurve};
pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use outliers::{percentile, remove_outliers};
pub use reduce::{reduce, Pca, Reduction};
pub use summary::{size_stats, summarize, ClusterSummary, PatchMeta, SizeStats};

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_points(points: &[Vec<f64>]) -> crate::Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    for p in points {
        if p.len() != d {
            return Err(crate::Error::Dimension { expected: d, got: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::InvalidParam("non-finite latent coordinate".into()));
        }
    }
    Ok(d)
}
