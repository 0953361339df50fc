use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_points, sq_dist};
use crate::error::{Error, Result};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub max_iter: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams { max_iter: 300 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Mean squared euclidean distance to the assigned centroid.
    pub distortion: f64,
    pub iterations: usize,
    /// Distortion after every assignment step, in order.
    pub trace: Vec<f64>,
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Points are first put into a canonical (lexicographic) order, so the result
/// depends only on the multiset of points and the seed, never on input order.
/// Iteration stops at an assignment fixpoint or after `max_iter` rounds. A
/// centroid left without members is moved onto the point farthest from its
/// own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, params: KMeansParams) -> Result<KMeansResult> {
    check_points(points)?;
    let n = points.len();
    if k < 1 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidParam(format!("k = {k} exceeds the {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_slice()).collect();

    let mut centroids = plus_plus(&sorted, k, seed);
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in sorted.iter().enumerate() {
            let (best, d) = nearest(p, &centroids);
            total += d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let distortion = total / n as f64;
        if let Some(&prev) = trace.last() {
            debug_assert!(
                distortion <= prev * (1.0 + 1e-9) + 1e-12,
                "distortion rose from {prev} to {distortion}"
            );
        }
        trace.push(distortion);
        update_centroids(&sorted, &assign, &mut centroids);
        if !changed || iterations >= params.max_iter {
            break;
        }
    }

    let mut assignments = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = assign[pos];
    }
    let distortion = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum::<f64>()
        / n as f64;
    Ok(KMeansResult {
        assignments,
        centroids,
        distortion,
        iterations,
        trace,
    })
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let n = points.len();
    let mut centroids = vec![points[r.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn update_centroids(points: &[&[f64]], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let d = centroids[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let m = counts[j] as f64;
            centroids[j] = sums[j].iter().map(|s| s / m).collect();
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            // Farthest point from its own (updated) centroid; ties go to the
            // lowest index.
            let mut far = (0, -1.0);
            for (i, (p, &a)) in points.iter().zip(assign).enumerate() {
                let dd = sq_dist(p, &centroids[a]);
                if dd > far.1 {
                    far = (i, dd);
                }
            }
            centroids[j] = points[far.0].to_vec();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let r = kmeans(&pts, 1, 5, KMeansParams::default()).unwrap();
        assert!((r.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((r.centroids[0][1] - 1.0).abs() < 1e-12);
        let expected = (2.0 + 2.0 + 4.0) / 3.0;
        assert!((r.distortion - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_points_have_zero_distortion() {
        let pts = vec![vec![1.5, -2.0]; 7];
        assert_eq!(kmeans(&pts, 1, 0, KMeansParams::default()).unwrap().distortion, 0.0);
        // More clusters than distinct points still terminates.
        assert_eq!(kmeans(&pts, 3, 0, KMeansParams::default()).unwrap().distortion, 0.0);
    }

    #[test]
    fn k_out_of_range() {
        let pts = vec![vec![0.0]; 2];
        assert!(kmeans(&pts, 0, 0, KMeansParams::default()).is_err());
        assert!(kmeans(&pts, 3, 0, KMeansParams::default()).is_err());
    }

    #[test]
    fn trace_never_increases() {
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64 * 0.37;
                vec![t.sin() * 4.0 + (i % 3) as f64, (t * 1.3).cos() * 2.0]
            })
            .collect();
        for seed in 0..10 {
            let r = kmeans(&pts, 4, seed, KMeansParams::default()).unwrap();
            for w in r.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
