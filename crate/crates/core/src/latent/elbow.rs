use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansParams, KMeansResult};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Distortion (mean squared distance to the assigned centroid) per k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub ks: Vec<usize>,
    pub distortions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowChoice {
    pub k: usize,
    /// No interior k has positive curvature; `k` is then the largest scanned.
    pub no_elbow: bool,
}

/// Runs k-means for each k with a per-k seed derived from `seed`.
pub fn elbow_scan(
    points: &[Vec<f64>],
    ks: &[usize],
    seed: u64,
    params: KMeansParams,
) -> Result<(ElbowCurve, Vec<KMeansResult>)> {
    let runs = crate::par::try_map(ks, |&k| {
        kmeans(points, k, derive_seed(seed, "kmeans", &[k as u64]), params)
    })?;
    let curve = ElbowCurve {
        ks: ks.to_vec(),
        distortions: runs.iter().map(|r| r.distortion).collect(),
    };
    Ok((curve, runs))
}

/// Picks the k with the largest discrete second difference
/// `d(k-1) - 2 d(k) + d(k+1)`; ties go to the smaller k.
pub fn elbow_select(curve: &ElbowCurve) -> Result<ElbowChoice> {
    if curve.ks.len() != curve.distortions.len() {
        return Err(Error::InvalidParam("ks and distortions differ in length".into()));
    }
    if curve.ks.len() < 3 {
        return Err(Error::Insufficient(format!(
            "elbow selection needs at least 3 points, got {}",
            curve.ks.len()
        )));
    }
    if curve.ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("ks must be strictly ascending".into()));
    }
    let d = &curve.distortions;
    let mut best: Option<(usize, f64)> = None;
    for i in 1..d.len() - 1 {
        let curvature = d[i - 1] - 2.0 * d[i] + d[i + 1];
        if best.is_none_or(|(_, b)| curvature > b) {
            best = Some((i, curvature));
        }
    }
    let (i, curvature) = best.expect("at least one interior point");
    if curvature <= 0.0 {
        return Ok(ElbowChoice {
            k: *curve.ks.last().unwrap(),
            no_elbow: true,
        });
    }
    Ok(ElbowChoice {
        k: curve.ks[i],
        no_elbow: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharp_elbow_at_two() {
        let curve = ElbowCurve {
            ks: vec![1, 2, 3, 4],
            distortions: vec![100.0, 10.0, 9.5, 9.2],
        };
        assert_eq!(elbow_select(&curve).unwrap(), ElbowChoice { k: 2, no_elbow: false });
    }

    #[test]
    fn linear_curve_has_no_elbow() {
        let curve = ElbowCurve {
            ks: vec![2, 3, 4, 5],
            distortions: vec![8.0, 6.0, 4.0, 2.0],
        };
        assert_eq!(elbow_select(&curve).unwrap(), ElbowChoice { k: 5, no_elbow: true });
    }

    #[test]
    fn ties_prefer_smaller_k() {
        let curve = ElbowCurve {
            ks: vec![1, 2, 3, 4, 5],
            distortions: vec![10.0, 5.0, 5.0, 0.0, 0.0],
        };
        // Curvatures: 5, -5, 5 -> first maximum.
        assert_eq!(elbow_select(&curve).unwrap().k, 2);
    }

    #[test]
    fn short_curve_rejected() {
        let curve = ElbowCurve { ks: vec![1, 2], distortions: vec![2.0, 1.0] };
        assert!(elbow_select(&curve).is_err());
    }
}
