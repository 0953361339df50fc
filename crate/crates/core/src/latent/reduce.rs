use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::check_points;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Reduction {
    /// Cluster the raw activations.
    None,
    /// Project onto the leading principal directions. Without `target_dim`, the
    /// smallest count explaining `variance` of the total, capped at `max_dim`.
    Pca {
        target_dim: Option<usize>,
        #[serde(default = "default_variance")]
        variance: f64,
        #[serde(default = "default_max_dim")]
        max_dim: usize,
    },
}

fn default_variance() -> f64 {
    0.95
}

fn default_max_dim() -> usize {
    32
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Pca {
            target_dim: None,
            variance: default_variance(),
            max_dim: default_max_dim(),
        }
    }
}

/// A fitted principal-component projection.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit components, leading first. The largest-magnitude coordinate of each
    /// is positive.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, descending, all of them.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>], n_components: usize) -> Result<Pca> {
        let d = check_points(points)?;
        let n = points.len();
        if n < 2 {
            return Err(Error::Insufficient(format!("pca needs at least 2 points, got {n}")));
        }
        if n_components > d {
            return Err(Error::InvalidParam(format!(
                "target_dim {n_components} exceeds latent dimension {d}"
            )));
        }
        if n_components > n {
            return Err(Error::Insufficient(format!(
                "{n} points cannot support {n_components} components"
            )));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0; d];
        for p in points {
            for j in 0..d {
                centered[j] = p[j] - mean[j];
            }
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let components = order
            .iter()
            .take(n_components)
            .map(|&i| {
                let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let pivot = c
                    .iter()
                    .copied()
                    .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
                if pivot < 0.0 {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
                c
            })
            .collect();
        Ok(Pca { mean, components, eigenvalues })
    }

    pub fn transform(&self, point: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(point)
                    .zip(&self.mean)
                    .map(|((ci, x), m)| ci * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn inverse_transform(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &z) in self.components.iter().zip(coords) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += z * ci;
            }
        }
        out
    }

    /// Smallest number of leading components whose eigenvalues reach
    /// `fraction` of the total variance.
    pub fn components_for_variance(eigenvalues: &[f64], fraction: f64) -> usize {
        let total: f64 = eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1;
        }
        let mut acc = 0.0;
        for (i, v) in eigenvalues.iter().enumerate() {
            acc += v;
            if acc >= fraction * total - 1e-12 * total {
                return i + 1;
            }
        }
        eigenvalues.len()
    }
}

pub fn reduce(points: &[Vec<f64>], method: &Reduction) -> Result<Vec<Vec<f64>>> {
    match method {
        Reduction::None => {
            check_points(points)?;
            Ok(points.to_vec())
        }
        Reduction::Pca { target_dim, variance, max_dim } => {
            let dim = match target_dim {
                Some(t) => *t,
                None => {
                    if !(0.0..=1.0).contains(variance) || *max_dim == 0 {
                        return Err(Error::InvalidParam(
                            "pca variance must lie in [0,1] and max_dim be positive".into(),
                        ));
                    }
                    let d = check_points(points)?;
                    let full = Pca::fit(points, 0)?;
                    Pca::components_for_variance(&full.eigenvalues, *variance)
                        .min(*max_dim)
                        .min(d)
                        .min(points.len())
                }
            };
            let pca = Pca::fit(points, dim)?;
            Ok(points.iter().map(|p| pca.transform(p)).collect())
        }
    }
}
