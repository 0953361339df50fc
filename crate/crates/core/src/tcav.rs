//! Directional derivatives, TCAV scores and their significance against
//! random-direction baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::adapter::GradientVector;
use crate::cav::Cav;
use crate::dataset::Pathology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalDerivativeSet {
    pub concept_id: usize,
    pub class_k: Pathology,
    pub values: Vec<f64>,
}

/// `S(x) = grad(x) . v` for every example of one class.
pub fn directional_derivatives(
    gradients: &[GradientVector],
    cav: &Cav,
    class_k: Pathology,
) -> Result<DirectionalDerivativeSet> {
    if gradients.is_empty() {
        return Err(Error::Empty(format!("no {class_k} examples to score")));
    }
    let d = cav.direction.len();
    let values = gradients
        .iter()
        .map(|g| {
            if g.values.len() != d {
                return Err(Error::Dimension { expected: d, got: g.values.len() });
            }
            Ok(g.values.iter().zip(&cav.direction).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "non-finite directional derivative for example {}",
            gradients[bad].id
        )));
    }
    Ok(DirectionalDerivativeSet { concept_id: cav.concept_id, class_k, values })
}

/// Fraction of strictly positive derivatives. Zero counts as non-positive.
pub fn tcav_score(derivatives: &DirectionalDerivativeSet) -> Result<f64> {
    positive_fraction(&derivatives.values)
}

fn positive_fraction(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("empty directional derivative set".into()));
    }
    let positive = values.iter().filter(|&&s| s > 0.0).count();
    Ok(positive as f64 / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub significant: bool,
    /// Welch statistic; infinite when both samples are constant and differ.
    pub t: f64,
    pub df: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test for equal means.
pub fn significance_test(concept_scores: &[f64], random_scores: &[f64], alpha: f64) -> Result<Significance> {
    if concept_scores.len() < 2 || random_scores.len() < 2 {
        return Err(Error::Insufficient(format!(
            "t-test needs at least 2 scores per sample, got {} and {}",
            concept_scores.len(),
            random_scores.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!("alpha {alpha} outside (0, 1)")));
    }
    let (m1, v1) = mean_var(concept_scores);
    let (m2, v2) = mean_var(random_scores);
    let (n1, n2) = (concept_scores.len() as f64, random_scores.len() as f64);
    let (a, b) = (v1 / n1, v2 / n2);
    let se2 = a + b;
    if se2 == 0.0 {
        let (p_value, t) = if m1 == m2 { (1.0, 0.0) } else { (0.0, f64::INFINITY.copysign(m1 - m2)) };
        return Ok(Significance { p_value, significant: p_value < alpha, t, df: n1 + n2 - 2.0 });
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(Significance { p_value, significant: p_value < alpha, t, df })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcavStatus {
    Scored,
    Degenerate,
    Insignificant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub std: f64,
}

impl ScoreSummary {
    /// Population statistics.
    pub fn of(values: &[f64]) -> ScoreSummary {
        if values.is_empty() {
            return ScoreSummary { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ScoreSummary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub concept_id: usize,
    pub class_k: Pathology,
    /// Mean TCAV score over the concept CAVs; absent when degenerate.
    pub score: Option<f64>,
    pub p_value: Option<f64>,
    pub status: TcavStatus,
    pub n_trials: usize,
    pub random_scores_summary: ScoreSummary,
    pub cav_scores: Vec<f64>,
}

impl TcavResult {
    pub fn is_scored(&self) -> bool {
        self.status == TcavStatus::Scored
    }
}

/// Scores of one direction set against one class, plus whether every
/// derivative was non-positive.
fn class_scores(cavs: &[Cav], gradients: &[GradientVector], class_k: Pathology) -> Result<(Vec<f64>, bool)> {
    let mut all_nonpositive = true;
    let scores = cavs
        .iter()
        .map(|cav| {
            let s = directional_derivatives(gradients, cav, class_k)?;
            all_nonpositive &= s.values.iter().all(|&v| v <= 0.0);
            tcav_score(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, all_nonpositive))
}

/// Scores one concept against every class in `gradients`.
///
/// A class is degenerate when every concept CAV leaves all its derivatives
/// non-positive; it then carries no score. Otherwise the mean per-CAV score is
/// tested against the scores of `random_cavs`.
pub fn score_concept(
    concept_id: usize,
    concept_cavs: &[Cav],
    random_cavs: &[Cav],
    gradients: &BTreeMap<Pathology, Vec<GradientVector>>,
    classes: &[Pathology],
    alpha: f64,
) -> Result<Vec<TcavResult>> {
    if concept_cavs.len() < 2 {
        return Err(Error::Insufficient(format!(
            "concept {concept_id} has {} CAVs, need at least 2",
            concept_cavs.len()
        )));
    }
    classes
        .iter()
        .map(|&class_k| {
            let grads = gradients
                .get(&class_k)
                .filter(|g| !g.is_empty())
                .ok_or_else(|| Error::MissingExample(format!("gradients for class {class_k}")))?;
            let (cav_scores, degenerate) = class_scores(concept_cavs, grads, class_k)?;
            let (random_scores, _) = class_scores(random_cavs, grads, class_k)?;
            let random_scores_summary = ScoreSummary::of(&random_scores);
            let n_trials = random_scores.len();
            if degenerate {
                return Ok(TcavResult {
                    concept_id,
                    class_k,
                    score: None,
                    p_value: None,
                    status: TcavStatus::Degenerate,
                    n_trials,
                    random_scores_summary,
                    cav_scores,
                });
            }
            let score = cav_scores.iter().sum::<f64>() / cav_scores.len() as f64;
            let sig = significance_test(&cav_scores, &random_scores, alpha)?;
            Ok(TcavResult {
                concept_id,
                class_k,
                score: Some(score),
                p_value: Some(sig.p_value),
                status: if sig.significant { TcavStatus::Scored } else { TcavStatus::Insignificant },
                n_trials,
                random_scores_summary,
                cav_scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub per_concept: BTreeMap<usize, f64>,
    pub mean: f64,
    pub std: f64,
}

/// Max minus min score per concept over its classes that carry a score, and
/// the population mean/std of those spreads. Concepts without any score are
/// skipped.
pub fn score_spread(results: &[TcavResult]) -> SpreadSummary {
    let mut by_concept: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for r in results {
        if let Some(s) = r.score {
            let e = by_concept.entry(r.concept_id).or_insert((s, s));
            e.0 = e.0.min(s);
            e.1 = e.1.max(s);
        }
    }
    let per_concept: BTreeMap<usize, f64> = by_concept.into_iter().map(|(c, (lo, hi))| (c, hi - lo)).collect();
    let spreads: Vec<f64> = per_concept.values().copied().collect();
    let ScoreSummary { mean, std } = ScoreSummary::of(&spreads);
    SpreadSummary { per_concept, mean, std }
}
