//! Access to middle-layer activations and to gradients of a scalarized
//! segmentation output with respect to that layer.
//!
//! Two implementations share the [`ModelAdapter`] trait:
//!
//! * [`AnalyticReference`]: a linear "encoder" `a = W x` followed by a
//!   quadratic head `h(a) = w.a + (eps/2) a'Da` per target, whose gradient
//!   `w + eps D a` is available in closed form.
//! * [`FileBacked`]: rows of activation/gradient matrices exported by an
//!   external model, looked up by example id.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::seed::{derive_seed, rng};

/// Output class whose summed pre-softmax logit is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Target {
    Lv,
    Rv,
    Myo,
    /// Sum of the three structure logits.
    ForegroundSum,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Lv, Target::Rv, Target::Myo, Target::ForegroundSum];

    /// Name used in `gradients_<name>.npy`.
    pub fn file_stem(self) -> &'static str {
        match self {
            Target::Lv => "lv",
            Target::Rv => "rv",
            Target::Myo => "myo",
            Target::ForegroundSum => "foreground_sum",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.file_stem().eq_ignore_ascii_case(s) || format!("{t:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownLabel(format!("gradient target `{s}`")))
    }
}

/// A single network input, addressed by id.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub id: &'a str,
    pub image: ArrayView2<'a, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub id: String,
    pub target: Target,
    pub values: Vec<f64>,
}

pub trait ModelAdapter: Send + Sync {
    /// Side length of the square network input.
    fn input_size(&self) -> usize;

    fn latent_dim(&self) -> usize;

    /// Middle-layer activations, one per input, in input order.
    fn activations(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<LatentVector>>;

    /// Gradients of the scalarized `target` output with respect to the middle
    /// layer, one per input, in input order.
    fn gradients(&self, inputs: &[ModelInput<'_>], target: Target) -> Result<Vec<GradientVector>>;
}

fn check_input_size(inputs: &[ModelInput<'_>], size: usize) -> Result<()> {
    for input in inputs {
        if input.image.dim() != (size, size) {
            return Err(Error::ShapeMismatch {
                id: input.id.to_string(),
                detail: format!(
                    "network input must be {size}x{size}, got {:?}",
                    input.image.dim()
                ),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analytic reference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticParams {
    pub input_size: usize,
    pub latent_dim: usize,
    /// Weight of the quadratic term of every head.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for AnalyticParams {
    fn default() -> Self {
        AnalyticParams {
            input_size: 348,
            latent_dim: 64,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

/// Linear part `w` and diagonal curvature `D` of one quadratic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub linear: Vec<f64>,
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AnalyticReference {
    params: AnalyticParams,
    /// `latent_dim x pixels`; rows sum to zero so a constant image maps to the
    /// zero vector.
    encoder: Array2<f64>,
    heads: BTreeMap<Target, Head>,
}

impl AnalyticReference {
    pub fn new(params: AnalyticParams) -> Result<Self> {
        if params.latent_dim == 0 {
            return Err(Error::InvalidParam("latent_dim must be positive".into()));
        }
        if params.input_size == 0 {
            return Err(Error::InvalidParam("input_size must be positive".into()));
        }
        if !params.epsilon.is_finite() {
            return Err(Error::InvalidParam("epsilon must be finite".into()));
        }
        let pixels = params.input_size * params.input_size;
        let d = params.latent_dim;
        let scale = 1.0 / (pixels as f64).sqrt();
        let mut enc_rng = rng(derive_seed(params.seed, "analytic-encoder", &[]));
        let mut encoder = Array2::<f64>::zeros((d, pixels));
        for mut row in encoder.rows_mut() {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut enc_rng);
                *v = z * scale;
            }
            let mean = row.sum() / pixels as f64;
            row.mapv_inplace(|v| v - mean);
        }

        let mut heads = BTreeMap::new();
        for (i, target) in [Target::Lv, Target::Rv, Target::Myo].into_iter().enumerate() {
            let mut head_rng = rng(derive_seed(params.seed, "analytic-head", &[i as u64]));
            let linear: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut head_rng);
                    z / (d as f64).sqrt()
                })
                .collect();
            let diagonal: Vec<f64> = (0..d).map(|_| head_rng.random_range(-1.0..1.0)).collect();
            heads.insert(target, Head { linear, diagonal });
        }
        // h_fg = h_lv + h_rv + h_myo, so its parameters are the sums.
        let sum = |f: fn(&Head) -> &Vec<f64>| -> Vec<f64> {
            (0..d)
                .map(|j| heads.values().map(|h| f(h)[j]).sum())
                .collect()
        };
        let fg = Head {
            linear: sum(|h| &h.linear),
            diagonal: sum(|h| &h.diagonal),
        };
        heads.insert(Target::ForegroundSum, fg);
        Ok(AnalyticReference {
            params,
            encoder,
            heads,
        })
    }

    pub fn params(&self) -> &AnalyticParams {
        &self.params
    }

    pub fn head(&self, target: Target) -> &Head {
        &self.heads[&target]
    }

    /// Replaces the head of `target`; used to plant known directions.
    pub fn set_head(&mut self, target: Target, head: Head) -> Result<()> {
        let d = self.params.latent_dim;
        for len in [head.linear.len(), head.diagonal.len()] {
            if len != d {
                return Err(Error::Dimension { expected: d, got: len });
            }
        }
        self.heads.insert(target, head);
        Ok(())
    }

    pub fn encode(&self, image: ArrayView2<'_, f32>) -> Vec<f64> {
        let x: Array1<f64> = image.iter().map(|&v| f64::from(v)).collect();
        self.encoder.dot(&x).to_vec()
    }

    /// Scalar head output `w.a + (eps/2) a'Da` at latent point `a`.
    pub fn head_value(&self, latent: &[f64], target: Target) -> f64 {
        let head = &self.heads[&target];
        let eps = self.params.epsilon;
        latent
            .iter()
            .zip(&head.linear)
            .zip(&head.diagonal)
            .map(|((&a, &w), &dd)| w * a + 0.5 * eps * dd * a * a)
            .sum()
    }

    /// Closed-form gradient `w + eps D a`.
    pub fn head_gradient(&self, latent: &[f64], target: Target) -> Vec<f64> {
        let head = &self.heads[&target];
        let eps = self.params.epsilon;
        latent
            .iter()
            .zip(&head.linear)
            .zip(&head.diagonal)
            .map(|((&a, &w), &dd)| w + eps * dd * a)
            .collect()
    }
}

impl ModelAdapter for AnalyticReference {
    fn input_size(&self) -> usize {
        self.params.input_size
    }

    fn latent_dim(&self) -> usize {
        self.params.latent_dim
    }

    fn activations(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<LatentVector>> {
        check_input_size(inputs, self.params.input_size)?;
        Ok(crate::par::map(inputs, |input| LatentVector {
            id: input.id.to_string(),
            values: self.encode(input.image),
        }))
    }

    fn gradients(&self, inputs: &[ModelInput<'_>], target: Target) -> Result<Vec<GradientVector>> {
        check_input_size(inputs, self.params.input_size)?;
        Ok(crate::par::map(inputs, |input| GradientVector {
            id: input.id.to_string(),
            target,
            values: self.head_gradient(&self.encode(input.image), target),
        }))
    }
}

// ---------------------------------------------------------------------------
// File-backed

pub const INDEX_FILE: &str = "index.json";
pub const ACTIVATIONS_FILE: &str = "activations.npy";

pub fn gradients_file(target: Target) -> String {
    format!("gradients_{}.npy", target.file_stem())
}

/// `index.json` of an exported tensor directory: row `i` of every array
/// belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub version: u32,
    pub latent_dim: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FileBacked {
    input_size: usize,
    latent_dim: usize,
    rows: BTreeMap<String, usize>,
    activations: Array2<f32>,
    gradients: BTreeMap<Target, Array2<f32>>,
}

impl FileBacked {
    /// Loads `index.json`, `activations.npy` and whichever
    /// `gradients_<target>.npy` files are present.
    pub fn open(dir: &Path, input_size: usize) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: TensorIndex =
            serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
        let activations: Array2<f32> = npy::read(&dir.join(ACTIVATIONS_FILE))?;
        let n = index.ids.len();
        let check = |a: &Array2<f32>, what: &str| -> Result<()> {
            if a.nrows() != n {
                return Err(Error::ShapeMismatch {
                    id: what.to_string(),
                    detail: format!("{} rows but index lists {n} ids", a.nrows()),
                });
            }
            if a.ncols() != index.latent_dim {
                return Err(Error::Dimension {
                    expected: index.latent_dim,
                    got: a.ncols(),
                });
            }
            Ok(())
        };
        check(&activations, ACTIVATIONS_FILE)?;
        let mut gradients = BTreeMap::new();
        for target in Target::ALL {
            let path = dir.join(gradients_file(target));
            if path.exists() {
                let g: Array2<f32> = npy::read(&path)?;
                check(&g, &gradients_file(target))?;
                gradients.insert(target, g);
            }
        }
        let mut rows = BTreeMap::new();
        for (i, id) in index.ids.iter().enumerate() {
            if rows.insert(id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate id `{id}` in {}", index_path.display())));
            }
        }
        if input_size == 0 {
            return Err(Error::InvalidParam("input_size must be positive".into()));
        }
        Ok(FileBacked {
            input_size,
            latent_dim: index.latent_dim,
            rows,
            activations,
            gradients,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    fn lookup(&self, matrix: &Array2<f32>, id: &str) -> Result<Vec<f64>> {
        let row = *self
            .rows
            .get(id)
            .ok_or_else(|| Error::MissingExample(id.to_string()))?;
        Ok(matrix.row(row).iter().map(|&v| f64::from(v)).collect())
    }
}

impl ModelAdapter for FileBacked {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn activations(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<LatentVector>> {
        check_input_size(inputs, self.input_size)?;
        inputs
            .iter()
            .map(|input| {
                Ok(LatentVector {
                    id: input.id.to_string(),
                    values: self.lookup(&self.activations, input.id)?,
                })
            })
            .collect()
    }

    fn gradients(&self, inputs: &[ModelInput<'_>], target: Target) -> Result<Vec<GradientVector>> {
        check_input_size(inputs, self.input_size)?;
        let matrix = self.gradients.get(&target).ok_or_else(|| {
            Error::UnknownLabel(format!("no exported gradients for target `{target}`"))
        })?;
        inputs
            .iter()
            .map(|input| {
                Ok(GradientVector {
                    id: input.id.to_string(),
                    target,
                    values: self.lookup(matrix, input.id)?,
                })
            })
            .collect()
    }
}

/// Writes a tensor directory in the layout [`FileBacked::open`] reads.
pub fn write_tensor_dir(
    dir: &Path,
    ids: &[String],
    activations: &Array2<f32>,
    gradients: &BTreeMap<Target, Array2<f32>>,
) -> Result<PathBuf> {
    let d = activations.ncols();
    for (name, m) in std::iter::once((ACTIVATIONS_FILE.to_string(), activations))
        .chain(gradients.iter().map(|(t, m)| (gradients_file(*t), m)))
    {
        if m.nrows() != ids.len() {
            return Err(Error::ShapeMismatch {
                id: name,
                detail: format!("{} rows for {} ids", m.nrows(), ids.len()),
            });
        }
        if m.ncols() != d {
            return Err(Error::Dimension { expected: d, got: m.ncols() });
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    npy::write(&dir.join(ACTIVATIONS_FILE), activations)?;
    for (target, m) in gradients {
        npy::write(&dir.join(gradients_file(*target)), m)?;
    }
    let index = TensorIndex {
        version: 1,
        latent_dim: d,
        ids: ids.to_vec(),
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(dir.to_path_buf())
}

/// Stacks row vectors into an `f32` matrix.
pub fn stack_rows(rows: &[Vec<f64>], dim: usize) -> Result<Array2<f32>> {
    let mut m = Array2::<f32>::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Dimension { expected: dim, got: r.len() });
        }
        for (j, &v) in r.iter().enumerate() {
            m[[i, j]] = v as f32;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small() -> AnalyticReference {
        AnalyticReference::new(AnalyticParams {
            input_size: 8,
            latent_dim: 6,
            epsilon: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    fn encode(img: &Array2<f32>) -> Vec<f64> {
        small().encode(img.view())
    }

    #[test]
    fn zero_and_constant_images_map_to_zero() {
        let m = small();
        for img in [Array2::<f32>::zeros((8, 8)), Array2::from_elem((8, 8), 0.7)] {
            let out = m
                .activations(&[ModelInput { id: "z", image: img.view() }])
                .unwrap();
            assert!(out[0].values.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn activations_are_additive() {
        let a = Array2::from_shape_fn((8, 8), |(r, c)| ((r * 3 + c) % 5) as f32 / 5.0);
        let b = Array2::from_shape_fn((8, 8), |(r, c)| ((r + 2 * c) % 7) as f32 / 7.0);
        let sum = &a + &b;
        let (va, vb, vs) = (encode(&a), encode(&b), encode(&sum));
        // the image sum itself is rounded to f32
        for j in 0..6 {
            assert!((va[j] + vb[j] - vs[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_head_gradient_is_constant() {
        let mut m = AnalyticReference::new(AnalyticParams {
            input_size: 8,
            latent_dim: 6,
            epsilon: 0.0,
            seed: 3,
        })
        .unwrap();
        let w = m.head(Target::Lv).linear.clone();
        let a = Array2::from_shape_fn((8, 8), |(r, c)| (r * c) as f32 / 49.0);
        let g = m
            .gradients(&[ModelInput { id: "a", image: a.view() }], Target::Lv)
            .unwrap();
        assert_eq!(g[0].values, w);
        assert!(m
            .set_head(Target::Lv, Head { linear: vec![0.0; 5], diagonal: vec![0.0; 6] })
            .is_err());
    }

    #[test]
    fn foreground_head_is_sum_of_structures() {
        let m = small();
        let a = [0.3, -0.2, 1.0, 0.5, -1.5, 0.1];
        let sum: f64 = [Target::Lv, Target::Rv, Target::Myo]
            .iter()
            .map(|&t| m.head_value(&a, t))
            .sum();
        assert!((sum - m.head_value(&a, Target::ForegroundSum)).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let img = Array2::<f32>::zeros((7, 8));
        let err = small()
            .activations(&[ModelInput { id: "bad", image: img.view() }])
            .unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn file_backed_round_trip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["x1".to_string(), "x2".to_string()];
        let acts = ndarray::array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.5]];
        let grads = ndarray::array![[0.25f32, -1.0, 0.0], [1e-7, 3.0, -2.5]];
        let mut g = BTreeMap::new();
        g.insert(Target::ForegroundSum, grads.clone());
        write_tensor_dir(dir.path(), &ids, &acts, &g).unwrap();

        let fb = FileBacked::open(dir.path(), 4).unwrap();
        let img = Array2::<f32>::zeros((4, 4));
        let inputs = [
            ModelInput { id: "x2", image: img.view() },
            ModelInput { id: "x1", image: img.view() },
        ];
        let a = fb.activations(&inputs).unwrap();
        assert_eq!(a[0].values, vec![4.0, 5.0, 6.5]);
        assert_eq!(a[1].values, vec![1.0, 2.0, 3.0]);
        let gr = fb.gradients(&inputs, Target::ForegroundSum).unwrap();
        assert_eq!(gr[0].values, vec![f64::from(1e-7f32), 3.0, -2.5]);
        assert!(fb.gradients(&inputs, Target::Lv).is_err());
        let missing = [ModelInput { id: "x3", image: img.view() }];
        assert!(matches!(fb.activations(&missing), Err(Error::MissingExample(_))));
    }

    #[test]
    fn file_backed_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["x1".to_string()];
        write_tensor_dir(dir.path(), &ids, &ndarray::array![[1.0f32, 2.0]], &BTreeMap::new()).unwrap();
        npy::write(
            &dir.path().join(gradients_file(Target::Lv)),
            &ndarray::array![[1.0f32, 2.0, 3.0]],
        )
        .unwrap();
        assert!(matches!(
            FileBacked::open(dir.path(), 4),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
    }
}
