//! Candidate concepts: which clusters qualify, and how random counterpart
//! samples are drawn for them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::ClusterSummary;
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub min_patients: usize,
    pub max_single_patient_share: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            min_size: 30,
            max_size: 600,
            min_patients: 3,
            max_single_patient_share: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size > self.max_size {
            return Err(Error::InvalidParam("min_size exceeds max_size".into()));
        }
        if !(self.max_single_patient_share > 0.0 && self.max_single_patient_share <= 1.0) {
            return Err(Error::InvalidParam(
                "max_single_patient_share must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    TooSmall,
    TooLarge,
    /// All patches come from one patient, or one patient dominates the cluster.
    SinglePatient,
    TooFewPatients,
}

impl RejectionReason {
    pub fn describe(self) -> &'static str {
        match self {
            RejectionReason::TooSmall => "too small",
            RejectionReason::TooLarge => "too large",
            RejectionReason::SinglePatient => "single patient",
            RejectionReason::TooFewPatients => "too few patients",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub cluster_id: usize,
    pub member_ids: Vec<String>,
    /// Indices into the pool of all patch latent vectors.
    pub member_indices: Vec<usize>,
    pub selected: bool,
    pub rejection_reason: Option<RejectionReason>,
}

impl Concept {
    pub fn member_vectors(&self, pool: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.member_indices.iter().map(|&i| pool[i].clone()).collect()
    }
}

fn rejection(summary: &ClusterSummary, config: &SelectionConfig) -> Option<RejectionReason> {
    let patients = summary.distinct_patients();
    if patients == 1 {
        Some(RejectionReason::SinglePatient)
    } else if summary.size < config.min_size {
        Some(RejectionReason::TooSmall)
    } else if summary.size > config.max_size {
        Some(RejectionReason::TooLarge)
    } else if patients < config.min_patients {
        Some(RejectionReason::TooFewPatients)
    } else if summary.max_patient_share() > config.max_single_patient_share {
        Some(RejectionReason::SinglePatient)
    } else {
        None
    }
}

/// Flags every cluster as selected or rejected. Rejected clusters stay in the
/// output and can still be scored.
pub fn select_concepts(summaries: &[ClusterSummary], config: &SelectionConfig) -> Result<Vec<Concept>> {
    config.validate()?;
    if summaries.is_empty() {
        return Err(Error::Empty("no clusters to select concepts from".into()));
    }
    Ok(summaries
        .iter()
        .map(|s| {
            let reason = rejection(s, config);
            Concept {
                cluster_id: s.cluster_id,
                member_ids: s.member_patches.clone(),
                member_indices: s.member_indices.clone(),
                selected: reason.is_none(),
                rejection_reason: reason,
            }
        })
        .collect())
}

/// Uniform sample without replacement of `size` indices from `0..population`,
/// skipping `exclude`, in seed-shuffled order.
pub fn sample_counterpart(
    population: usize,
    exclude: &BTreeSet<usize>,
    size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..population).filter(|i| !exclude.contains(i)).collect();
    if candidates.len() < size {
        return Err(Error::Insufficient(format!(
            "counterpart of size {size} requested from {} eligible points",
            candidates.len()
        )));
    }
    let mut r = rng(seed);
    let (sample, _) = candidates.partial_shuffle(&mut r, size);
    Ok(sample.to_vec())
}
