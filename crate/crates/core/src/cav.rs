//! Concept Activation Vectors: the unit normal of an L2-regularized logistic
//! regression separating concept activations from a counterpart sample.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavParams {
    pub l2: f64,
    pub tolerance: f64,
    pub max_steps: usize,
    pub holdout_fraction: f64,
    pub low_quality_below: f64,
}

impl Default for CavParams {
    fn default() -> Self {
        CavParams {
            l2: 1e-3,
            tolerance: 1e-6,
            max_steps: 200,
            holdout_fraction: 0.2,
            low_quality_below: 0.65,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavKind {
    /// Concept members against a counterpart sample.
    Concept,
    /// Two random samples against each other; the null baseline.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept_id: usize,
    pub kind: CavKind,
    pub counterpart_seed: u64,
    /// Unit normal of the decision boundary, pointing to the concept side.
    pub direction: Vec<f64>,
    /// Intercept divided by the weight norm: the classifier decides "concept"
    /// where `direction . x + offset > 0`.
    pub offset: f64,
    /// Accuracy on the held-out split.
    pub training_accuracy: f64,
    pub low_quality: bool,
    pub steps: usize,
}

impl Cav {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.direction, x) + self.offset
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major block of points sharing one label.
struct LabeledBlock {
    data: Vec<f64>,
    rows: usize,
    label: f64,
}

impl LabeledBlock {
    fn new(points: &[&Vec<f64>], label: f64) -> Self {
        LabeledBlock {
            data: points.iter().flat_map(|p| p.iter().copied()).collect(),
            rows: points.len(),
            label,
        }
    }

    fn row(&self, i: usize, d: usize) -> &[f64] {
        &self.data[i * d..(i + 1) * d]
    }

    /// Accumulates the unnormalized data term of the logistic loss, its
    /// gradient `sum_i -y_i sigma(-m_i) x~_i` and (upper triangle of) its
    /// Hessian `sum_i sigma(m_i) sigma(-m_i) x~_i x~_i'`, with
    /// `x~ = (x, 1)` and `m_i = y_i (w . x_i + b)`.
    fn accumulate(&self, w: &[f64], b: f64, d: usize, grad: &mut [f64], hess: &mut [f64]) {
        let dim = d + 1;
        for i in 0..self.rows {
            let x = self.row(i, d);
            let margin = self.label * (dot(w, x) + b);
            let p = sigmoid_neg(margin);
            let coef = -self.label * p;
            for (g, xi) in grad[..d].iter_mut().zip(x) {
                *g += coef * xi;
            }
            grad[d] += coef;
            let c = p * (1.0 - p);
            for j in 0..d {
                let cj = c * x[j];
                let row = &mut hess[j * dim..(j + 1) * dim];
                for l in j..d {
                    row[l] += cj * x[l];
                }
                row[d] += cj;
            }
            hess[d * dim + d] += c;
        }
    }

    fn loss(&self, w: &[f64], b: f64, d: usize) -> f64 {
        (0..self.rows)
            .map(|i| softplus_neg(self.label * (dot(w, self.row(i, d)) + b)))
            .sum()
    }

    fn correct(&self, w: &[f64], b: f64, d: usize) -> usize {
        (0..self.rows)
            .filter(|&i| self.label * (dot(w, self.row(i, d)) + b) > 0.0)
            .count()
    }
}

/// `1 / (1 + exp(m))` without overflow.
#[inline]
fn sigmoid_neg(m: f64) -> f64 {
    if m >= 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

/// `ln(1 + exp(-m))` without overflow.
#[inline]
fn softplus_neg(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Train/held-out split of one set. The permutation depends only on the seed
/// and the set size, so swapping the roles of the two sets trains on exactly
/// the same points with flipped labels.
fn split<'a>(points: &'a [Vec<f64>], seed: u64, holdout: f64) -> (Vec<&'a Vec<f64>>, Vec<&'a Vec<f64>>) {
    let n = points.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive_seed(seed, "cav-split", &[n as u64])));
    let n_hold = ((holdout * n as f64).round() as usize).clamp(1, n - 1);
    let hold = idx[..n_hold].iter().map(|&i| &points[i]).collect();
    let train = idx[n_hold..].iter().map(|&i| &points[i]).collect();
    (train, hold)
}

/// Fits a CAV separating `concept` (positive side) from `counterpart`.
///
/// Minimizes the mean logistic loss plus `l2/2 |w|^2` (intercept
/// unpenalized) by damped Newton iterations until the gradient norm drops
/// below `tolerance` or `max_steps` iterations have run.
pub fn fit_cav(
    concept: &[Vec<f64>],
    counterpart: &[Vec<f64>],
    seed: u64,
    params: &CavParams,
) -> Result<Cav> {
    if concept.len() < 2 || counterpart.len() < 2 {
        return Err(Error::Insufficient(format!(
            "cav needs at least 2 points per side, got {} and {}",
            concept.len(),
            counterpart.len()
        )));
    }
    let d = concept[0].len();
    if d == 0 {
        return Err(Error::InvalidParam("zero-dimensional latent space".into()));
    }
    for p in concept.iter().chain(counterpart) {
        if p.len() != d {
            return Err(Error::Dimension { expected: d, got: p.len() });
        }
    }
    let base = Cav {
        concept_id: 0,
        kind: CavKind::Concept,
        counterpart_seed: seed,
        direction: (0..d).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
        offset: 0.0,
        training_accuracy: 0.5,
        low_quality: true,
        steps: 0,
    };
    let first = &concept[0];
    if concept.iter().chain(counterpart).all(|p| p == first) {
        return Ok(base);
    }

    let (pos_train, pos_hold) = split(concept, seed, params.holdout_fraction);
    let (neg_train, neg_hold) = split(counterpart, seed, params.holdout_fraction);
    let pos = LabeledBlock::new(&pos_train, 1.0);
    let neg = LabeledBlock::new(&neg_train, -1.0);
    let n = (pos.rows + neg.rows) as f64;

    let dim = d + 1;
    let objective = |w: &[f64], b: f64| (pos.loss(w, b, d) + neg.loss(w, b, d)) / n + 0.5 * params.l2 * dot(w, w);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut steps = 0;
    while steps < params.max_steps {
        let (mut ga, mut gb) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut ha, mut hb) = (vec![0.0; dim * dim], vec![0.0; dim * dim]);
        pos.accumulate(&w, b, d, &mut ga, &mut ha);
        neg.accumulate(&w, b, d, &mut gb, &mut hb);
        let grad: Vec<f64> = (0..dim)
            .map(|j| (ga[j] + gb[j]) / n + if j < d { params.l2 * w[j] } else { 0.0 })
            .collect();
        if dot(&grad, &grad).sqrt() < params.tolerance {
            break;
        }
        let hess = DMatrix::from_fn(dim, dim, |r, c| {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            let ridge = if r == c && r < d { params.l2 } else { 0.0 };
            (ha[r * dim + c] + hb[r * dim + c]) / n + ridge
        });
        let g = DVector::from_column_slice(&grad);
        let delta: Vec<f64> = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&g).iter().copied().collect(),
            None => {
                let trace = hess.trace().max(f64::MIN_POSITIVE);
                grad.iter().map(|v| v / trace).collect()
            }
        };
        // Armijo backtracking on the damped Newton step.
        let f0 = objective(&w, b);
        let slope = dot(&grad, &delta);
        let mut t = 1.0;
        let (mut w_new, mut b_new);
        loop {
            w_new = w.iter().zip(&delta).map(|(wi, di)| wi - t * di).collect::<Vec<_>>();
            b_new = b - t * delta[d];
            if objective(&w_new, b_new) <= f0 - 1e-4 * t * slope || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        w = w_new;
        b = b_new;
        steps += 1;
    }

    let norm = dot(&w, &w).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Ok(Cav { steps, ..base });
    }
    let hold_pos = LabeledBlock::new(&pos_hold, 1.0);
    let hold_neg = LabeledBlock::new(&neg_hold, -1.0);
    let correct = hold_pos.correct(&w, b, d) + hold_neg.correct(&w, b, d);
    let accuracy = correct as f64 / (hold_pos.rows + hold_neg.rows) as f64;
    Ok(Cav {
        direction: w.iter().map(|x| x / norm).collect(),
        offset: b / norm,
        training_accuracy: accuracy,
        low_quality: accuracy < params.low_quality_below,
        steps,
        ..base
    })
}

// ---------------------------------------------------------------------------
// Store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreEntry {
    concept_id: usize,
    kind: CavKind,
    counterpart_seed: u64,
    file: String,
    offset: f64,
    training_accuracy: f64,
    low_quality: bool,
    steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreIndex {
    version: u32,
    latent_dim: usize,
    cavs: Vec<StoreEntry>,
}

fn store_file(cav: &Cav) -> String {
    let kind = match cav.kind {
        CavKind::Concept => "concept",
        CavKind::Random => "random",
    };
    format!("vectors/{kind}_{:04}_{:016x}.npy", cav.concept_id, cav.counterpart_seed)
}

/// Writes `index.json` plus one NPY direction vector per CAV.
pub fn write_cav_store(dir: &Path, cavs: &[Cav]) -> Result<()> {
    let latent_dim = cavs.first().map_or(0, |c| c.direction.len());
    let mut entries = Vec::with_capacity(cavs.len());
    for cav in cavs {
        let file = store_file(cav);
        npy::write(&dir.join(&file), &Array1::from(cav.direction.clone()))?;
        entries.push(StoreEntry {
            concept_id: cav.concept_id,
            kind: cav.kind,
            counterpart_seed: cav.counterpart_seed,
            file,
            offset: cav.offset,
            training_accuracy: cav.training_accuracy,
            low_quality: cav.low_quality,
            steps: cav.steps,
        });
    }
    let index = StoreIndex { version: 1, latent_dim, cavs: entries };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_cav_store(dir: &Path) -> Result<Vec<Cav>> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: StoreIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    index
        .cavs
        .into_iter()
        .map(|e| {
            let direction: Array1<f64> = npy::read(&dir.join(&e.file))?;
            if direction.len() != index.latent_dim {
                return Err(Error::Dimension { expected: index.latent_dim, got: direction.len() });
            }
            Ok(Cav {
                concept_id: e.concept_id,
                kind: e.kind,
                counterpart_seed: e.counterpart_seed,
                direction: direction.to_vec(),
                offset: e.offset,
                training_accuracy: e.training_accuracy,
                low_quality: e.low_quality,
                steps: e.steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_sets() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let concept = (0..20).map(|i| vec![2.0 + i as f64 * 0.1, 0.0, 0.0]).collect();
        let counter = (0..20).map(|i| vec![-2.0 - i as f64 * 0.1, 0.0, 0.0]).collect();
        (concept, counter)
    }

    #[test]
    fn separable_axis_recovered() {
        let (c, r) = axis_sets();
        let cav = fit_cav(&c, &r, 1, &CavParams::default()).unwrap();
        assert!((cav.direction[0] - 1.0).abs() < 1e-12);
        assert_eq!(cav.direction[1], 0.0);
        assert_eq!(cav.training_accuracy, 1.0);
        assert!(!cav.low_quality);
    }

    #[test]
    fn swapping_sets_negates_exactly() {
        let concept: Vec<Vec<f64>> = (0..15).map(|i| vec![(i as f64 * 0.7).sin() + 1.0, (i as f64).cos()]).collect();
        let counter: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.3).cos() - 0.5, (i as f64 * 1.7).sin()]).collect();
        let a = fit_cav(&concept, &counter, 9, &CavParams::default()).unwrap();
        let b = fit_cav(&counter, &concept, 9, &CavParams::default()).unwrap();
        let neg: Vec<f64> = b.direction.iter().map(|v| -v).collect();
        assert_eq!(a.direction, neg);
        assert_eq!(a.offset, -b.offset);
        assert_eq!(a.training_accuracy, b.training_accuracy);
    }

    #[test]
    fn identical_data_is_low_quality() {
        let pts = vec![vec![0.5, 0.5]; 10];
        let cav = fit_cav(&pts, &pts, 0, &CavParams::default()).unwrap();
        assert!(cav.low_quality);
        assert_eq!(cav.training_accuracy, 0.5);
        assert!((dot(&cav.direction, &cav.direction) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let (c, r) = axis_sets();
        assert!(fit_cav(&c[..1], &r, 0, &CavParams::default()).is_err());
        let bad = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(fit_cav(&c, &bad, 0, &CavParams::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn store_round_trip() {
        let (c, r) = axis_sets();
        let mut cav = fit_cav(&c, &r, 4, &CavParams::default()).unwrap();
        cav.concept_id = 7;
        let mut random = cav.clone();
        random.kind = CavKind::Random;
        random.counterpart_seed = 99;
        let dir = tempfile::tempdir().unwrap();
        write_cav_store(dir.path(), &[cav.clone(), random.clone()]).unwrap();
        assert_eq!(read_cav_store(dir.path()).unwrap(), vec![cav, random]);
    }
}
