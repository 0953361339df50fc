use super::sq_dist;

/// Linear-interpolation percentile (`q` in [0, 100]) of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Drops, per cluster, the points whose distance to the (unchanged) centroid is
/// strictly greater than the cluster's `quantile` distance. Removed points map
/// to `None`.
pub fn remove_outliers(
    assignments: &[usize],
    points: &[Vec<f64>],
    centroids: &[Vec<f64>],
    quantile: f64,
) -> Vec<Option<usize>> {
    let dist: Vec<f64> = points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]).sqrt())
        .collect();
    let mut cutoffs = vec![f64::INFINITY; centroids.len()];
    for (c, cutoff) in cutoffs.iter_mut().enumerate() {
        let members: Vec<f64> = assignments
            .iter()
            .zip(&dist)
            .filter(|(&a, _)| a == c)
            .map(|(_, &d)| d)
            .collect();
        if !members.is_empty() {
            *cutoff = percentile(&members, quantile * 100.0);
        }
    }
    assignments
        .iter()
        .zip(&dist)
        .map(|(&a, &d)| (d <= cutoffs[a]).then_some(a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_members_all_kept() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let out = remove_outliers(&[0; 4], &pts, &[vec![0.0, 0.0]], 0.95);
        assert!(out.iter().all(|a| *a == Some(0)));
    }

    #[test]
    fn single_far_point_removed() {
        let mut pts: Vec<Vec<f64>> = (0..99)
            .map(|i| {
                let t = i as f64 * 0.1;
                vec![t.cos(), t.sin()]
            })
            .collect();
        pts.push(vec![50.0, 0.0]);
        let out = remove_outliers(&[0; 100], &pts, &[vec![0.0, 0.0]], 0.95);
        assert_eq!(out.iter().filter(|a| a.is_none()).count(), 1);
        assert!(out[99].is_none());
    }

    #[test]
    fn singleton_cluster_survives() {
        let pts = vec![vec![0.0], vec![10.0], vec![0.5]];
        let out = remove_outliers(&[0, 1, 0], &pts, &[vec![0.25], vec![3.0]], 0.95);
        assert_eq!(out[1], Some(1));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.5);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }
}
