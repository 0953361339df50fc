use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sq_dist;
use crate::dataset::Pathology;

/// What the summary needs to know about each clustered patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: String,
    pub patient_id: String,
    pub pathology: Pathology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub member_patches: Vec<String>,
    /// Indices of the members in the clustered point list.
    pub member_indices: Vec<usize>,
    pub size: usize,
    pub per_pathology_counts: BTreeMap<Pathology, usize>,
    pub per_patient_counts: BTreeMap<String, usize>,
    pub centroid: Vec<f64>,
    pub mean_distance: f64,
}

impl ClusterSummary {
    pub fn distinct_patients(&self) -> usize {
        self.per_patient_counts.len()
    }

    pub fn max_patient_share(&self) -> f64 {
        let max = self.per_patient_counts.values().copied().max().unwrap_or(0);
        max as f64 / self.size.max(1) as f64
    }
}

/// One summary per cluster that kept at least one member after outlier
/// removal, ordered by cluster id.
pub fn summarize(
    assignments: &[Option<usize>],
    points: &[Vec<f64>],
    centroids: &[Vec<f64>],
    patches: &[PatchMeta],
) -> Vec<ClusterSummary> {
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, a) in assignments.iter().enumerate() {
        if let Some(c) = a {
            by_cluster.entry(*c).or_default().push(i);
        }
    }
    by_cluster
        .into_iter()
        .map(|(cluster_id, members)| {
            let mut per_pathology_counts = BTreeMap::new();
            let mut per_patient_counts = BTreeMap::new();
            let mut dist = 0.0;
            for &i in &members {
                *per_pathology_counts.entry(patches[i].pathology).or_insert(0) += 1;
                *per_patient_counts.entry(patches[i].patient_id.clone()).or_insert(0) += 1;
                dist += sq_dist(&points[i], &centroids[cluster_id]).sqrt();
            }
            ClusterSummary {
                cluster_id,
                member_patches: members.iter().map(|&i| patches[i].patch_id.clone()).collect(),
                size: members.len(),
                mean_distance: dist / members.len() as f64,
                member_indices: members,
                per_pathology_counts,
                per_patient_counts,
                centroid: centroids[cluster_id].clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub clusters: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub median: f64,
}

pub fn size_stats(summaries: &[ClusterSummary]) -> Option<SizeStats> {
    if summaries.is_empty() {
        return None;
    }
    let mut sizes: Vec<usize> = summaries.iter().map(|s| s.size).collect();
    sizes.sort_unstable();
    let n = sizes.len();
    let median = if n % 2 == 1 {
        sizes[n / 2] as f64
    } else {
        (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0
    };
    Some(SizeStats {
        clusters: n,
        min: sizes[0],
        max: sizes[n - 1],
        mean: sizes.iter().sum::<usize>() as f64 / n as f64,
        median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, patient: &str, p: Pathology) -> PatchMeta {
        PatchMeta { patch_id: id.into(), patient_id: patient.into(), pathology: p }
    }

    #[test]
    fn counts_per_pathology_and_patient() {
        let patches = vec![
            meta("a", "p1", Pathology::NOR),
            meta("b", "p1", Pathology::NOR),
            meta("c", "p2", Pathology::DCM),
        ];
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let s = summarize(&[Some(0); 3], &pts, &[vec![1.0]], &patches);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].size, 3);
        assert_eq!(s[0].per_pathology_counts[&Pathology::NOR], 2);
        assert_eq!(s[0].per_pathology_counts[&Pathology::DCM], 1);
        let mut sizes: Vec<usize> = s[0].per_patient_counts.values().copied().collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
        assert!((s[0].mean_distance - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_partition() {
        assert!(summarize(&[], &[], &[], &[]).is_empty());
        assert!(size_stats(&[]).is_none());
        let patches: Vec<PatchMeta> = (0..5).map(|i| meta(&i.to_string(), "p", Pathology::RV)).collect();
        let pts = vec![vec![0.0]; 5];
        let assign = [Some(0), None, Some(1), Some(1), Some(0)];
        let s = summarize(&assign, &pts, &[vec![0.0], vec![0.0]], &patches);
        assert_eq!(s.iter().map(|c| c.size).sum::<usize>(), 4);
        let stats = size_stats(&s).unwrap();
        assert_eq!((stats.min, stats.max, stats.median), (2, 2, 2.0));
    }
}
