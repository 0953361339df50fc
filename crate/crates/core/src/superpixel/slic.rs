//! SLIC on single-channel intensity.
//!
//! Local k-means over (intensity, row, col). Intensities in [0,1] are mapped to
//! a 0..100 scale internally so `compactness` has its usual meaning (the same
//! scale as the CIELAB lightness channel the original method clusters on).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INTENSITY_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    /// Segment counts of a multi-resolution run; each yields its own patches.
    pub resolutions: Vec<usize>,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_segments: 5,
            compactness: 10.0,
            max_iters: 10,
            resolutions: vec![5],
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(Error::InvalidParam("n_segments must be >= 1".into()));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::InvalidParam("compactness must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParam("max_iters must be >= 1".into()));
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::InvalidParam(
                "resolutions must be a non-empty list of positive counts".into(),
            ));
        }
        Ok(())
    }

    pub fn at_resolution(&self, n_segments: usize) -> SlicParams {
        SlicParams {
            n_segments,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    row: f64,
    col: f64,
    value: f64,
}

/// Segments `image` into at most `params.n_segments` 4-connected regions and
/// returns a label grid with labels `0..n_final`.
pub fn slic(image: &Array2<f32>, params: &SlicParams) -> Result<Array2<u32>> {
    params.validate()?;
    let (h, w) = image.dim();
    let n = h * w;
    if n == 0 {
        return Err(Error::InvalidParam("cannot segment an empty image".into()));
    }
    if params.n_segments > n {
        return Err(Error::InvalidParam(format!(
            "n_segments {} exceeds pixel count {n}",
            params.n_segments
        )));
    }
    let img = image.mapv(|v| f64::from(v) * INTENSITY_SCALE);
    let step = (n as f64 / params.n_segments as f64).sqrt();
    let mut centers = grid_centers(&img, params.n_segments);

    let spatial_weight = (params.compactness / step).powi(2);
    let window = step.ceil() as i64;
    let mut labels = Array2::<u32>::from_elem((h, w), u32::MAX);
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);

    for _ in 0..params.max_iters {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let r0 = (c.row.round() as i64 - window).max(0) as usize;
            let r1 = ((c.row.round() as i64 + window) as usize).min(h - 1);
            let c0 = (c.col.round() as i64 - window).max(0) as usize;
            let c1 = ((c.col.round() as i64 + window) as usize).min(w - 1);
            for r in r0..=r1 {
                for col in c0..=c1 {
                    let d = distance(c, r, col, img[[r, col]], spatial_weight);
                    if d < dist[[r, col]] {
                        dist[[r, col]] = d;
                        labels[[r, col]] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every search window join the globally nearest center.
        for ((r, col), l) in labels.indexed_iter_mut() {
            if *l == u32::MAX {
                let mut best = (f64::INFINITY, 0u32);
                for (k, c) in centers.iter().enumerate() {
                    let d = distance(c, r, col, img[[r, col]], spatial_weight);
                    if d < best.0 {
                        best = (d, k as u32);
                    }
                }
                *l = best.1;
            }
        }

        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for ((r, col), &l) in labels.indexed_iter() {
            let s = &mut sums[l as usize];
            s.0 += r as f64;
            s.1 += col as f64;
            s.2 += img[[r, col]];
            s.3 += 1;
        }
        let mut moved = false;
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.3 == 0 {
                continue;
            }
            let m = s.3 as f64;
            let next = Center {
                row: s.0 / m,
                col: s.1 / m,
                value: s.2 / m,
            };
            if (next.row - c.row).abs() > 1e-9
                || (next.col - c.col).abs() > 1e-9
                || (next.value - c.value).abs() > 1e-9
            {
                moved = true;
            }
            *c = next;
        }
        if !moved {
            break;
        }
    }

    let min_size = ((n as f64 / params.n_segments as f64) / 4.0).floor() as usize;
    Ok(enforce_connectivity(&labels, min_size))
}

#[inline]
fn distance(c: &Center, r: usize, col: usize, value: f64, spatial_weight: f64) -> f64 {
    let dv = value - c.value;
    let dr = r as f64 - c.row;
    let dc = col as f64 - c.col;
    dv * dv + spatial_weight * (dr * dr + dc * dc)
}

/// Exactly `k` seeds on a near-regular grid: `round(sqrt(k h / w))` rows, the
/// seeds of each row spread evenly, each moved to the lowest-gradient pixel of
/// its 3x3 neighbourhood.
fn grid_centers(img: &Array2<f64>, k: usize) -> Vec<Center> {
    let (h, w) = img.dim();
    let rows = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, k.min(h));
    let mut centers = Vec::with_capacity(k);
    for r in 0..rows {
        let in_row = k / rows + usize::from(r < k % rows);
        let y = ((r as f64 + 0.5) * h as f64 / rows as f64 - 0.5).max(0.0);
        for c in 0..in_row {
            let x = ((c as f64 + 0.5) * w as f64 / in_row as f64 - 0.5).max(0.0);
            let (py, px) = lowest_gradient(img, y.round() as usize, x.round() as usize);
            centers.push(Center {
                row: py as f64,
                col: px as f64,
                value: img[[py, px]],
            });
        }
    }
    centers
}

fn gradient_at(img: &Array2<f64>, r: usize, c: usize) -> f64 {
    let (h, w) = img.dim();
    let up = img[[r.saturating_sub(1), c]];
    let down = img[[(r + 1).min(h - 1), c]];
    let left = img[[r, c.saturating_sub(1)]];
    let right = img[[r, (c + 1).min(w - 1)]];
    (down - up).powi(2) + (right - left).powi(2)
}

fn lowest_gradient(img: &Array2<f64>, r: usize, c: usize) -> (usize, usize) {
    let (h, w) = img.dim();
    let mut best = (gradient_at(img, r, c), r, c);
    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
            let g = gradient_at(img, rr, cc);
            if g < best.0 {
                best = (g, rr, cc);
            }
        }
    }
    (best.1, best.2)
}

/// 4-connected components of a label grid, numbered in raster order.
pub fn connected_components(labels: &Array2<u32>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = labels.dim();
    let mut comp = Array2::<u32>::from_elem((h, w), u32::MAX);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if comp[[r, c]] != u32::MAX {
                continue;
            }
            let id = sizes.len() as u32;
            let label = labels[[r, c]];
            let mut size = 0;
            comp[[r, c]] = id;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for (ny, nx) in neighbours4(y, x, h, w) {
                    if comp[[ny, nx]] == u32::MAX && labels[[ny, nx]] == label {
                        comp[[ny, nx]] = id;
                        stack.push((ny, nx));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (comp, sizes)
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let down = (y + 1 < h).then(|| (y + 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let right = (x + 1 < w).then(|| (y, x + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Keeps the largest component of each label when it has at least `min_size`
/// pixels; every other fragment joins the neighbouring kept region with which
/// it shares the longest border. Output labels are `0..n` in raster order.
pub fn enforce_connectivity(labels: &Array2<u32>, min_size: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    let (comp, sizes) = connected_components(labels);
    let n_comp = sizes.len();

    let mut comp_label = vec![0u32; n_comp];
    for ((r, c), &id) in comp.indexed_iter() {
        comp_label[id as usize] = labels[[r, c]];
    }
    let mut largest: std::collections::BTreeMap<u32, usize> = Default::default();
    for id in 0..n_comp {
        let e = largest.entry(comp_label[id]).or_insert(id);
        if sizes[id] > sizes[*e] {
            *e = id;
        }
    }
    // owner[id] = the kept component this one is merged into.
    let mut owner: Vec<Option<usize>> = vec![None; n_comp];
    for &id in largest.values() {
        if sizes[id] >= min_size.max(1) {
            owner[id] = Some(id);
        }
    }
    if owner.iter().all(Option::is_none) {
        let biggest = (0..n_comp).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap();
        owner[biggest] = Some(biggest);
    }

    // Border lengths between adjacent components.
    let mut borders: Vec<std::collections::BTreeMap<usize, usize>> = vec![Default::default(); n_comp];
    for r in 0..h {
        for c in 0..w {
            let a = comp[[r, c]] as usize;
            if c + 1 < w {
                let b = comp[[r, c + 1]] as usize;
                if a != b {
                    *borders[a].entry(b).or_default() += 1;
                    *borders[b].entry(a).or_default() += 1;
                }
            }
            if r + 1 < h {
                let b = comp[[r + 1, c]] as usize;
                if a != b {
                    *borders[a].entry(b).or_default() += 1;
                    *borders[b].entry(a).or_default() += 1;
                }
            }
        }
    }

    loop {
        let mut progressed = false;
        let mut pending = false;
        for id in 0..n_comp {
            if owner[id].is_some() {
                continue;
            }
            let mut votes: std::collections::BTreeMap<usize, usize> = Default::default();
            for (&nb, &len) in &borders[id] {
                if let Some(o) = owner[nb] {
                    *votes.entry(o).or_default() += len;
                }
            }
            match votes.into_iter().max_by_key(|&(o, len)| (len, std::cmp::Reverse(o))) {
                Some((o, _)) => {
                    owner[id] = Some(o);
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !progressed {
            break;
        }
    }

    let mut relabel = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    let mut out = Array2::<u32>::zeros((h, w));
    for ((r, c), o) in out.indexed_iter_mut() {
        let kept = owner[comp[[r, c]] as usize].expect("every component is adjacent to a kept one");
        if relabel[kept] == u32::MAX {
            relabel[kept] = next;
            next += 1;
        }
        *o = relabel[kept];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn params(n: usize, compactness: f64) -> SlicParams {
        SlicParams {
            n_segments: n,
            compactness,
            max_iters: 10,
            resolutions: vec![n],
        }
    }

    #[test]
    fn constant_image_single_segment() {
        let img = Array2::from_elem((12, 9), 0.3f32);
        let labels = slic(&img, &params(1, 10.0)).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let img = Array2::from_elem((2, 2), 0.3f32);
        assert!(slic(&img, &params(5, 10.0)).is_err());
    }

    #[test]
    fn two_halves_recovered() {
        let img = Array2::from_shape_fn((8, 8), |(_, c)| if c < 4 { 0.0f32 } else { 1.0 });
        let labels = slic(&img, &params(2, 0.1)).unwrap();
        for ((_, c), &l) in labels.indexed_iter() {
            assert_eq!(l, if c < 4 { 0 } else { 1 });
        }
    }

    #[test]
    fn seeds_follow_requested_count() {
        let img = Array2::<f64>::zeros((64, 64));
        assert_eq!(grid_centers(&img, 5).len(), 5);
        assert_eq!(grid_centers(&img, 1).len(), 1);
        let img = Array2::<f64>::zeros((3, 40));
        assert_eq!(grid_centers(&img, 7).len(), 7);
    }

    #[test]
    fn orphan_fragments_are_merged() {
        // Label 1 appears as a big block plus a lone pixel inside label 0.
        let mut labels = Array2::<u32>::zeros((6, 6));
        for r in 0..6 {
            for c in 3..6 {
                labels[[r, c]] = 1;
            }
        }
        labels[[0, 0]] = 1;
        let out = enforce_connectivity(&labels, 2);
        assert_eq!(out[[0, 0]], out[[0, 1]]);
        let (_, sizes) = connected_components(&out);
        assert_eq!(sizes.len(), 2);
    }
}
