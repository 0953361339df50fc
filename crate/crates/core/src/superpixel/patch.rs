use ndarray::Array2;

use super::slic::{slic, SlicParams};
use crate::dataset::{SliceRecord, SliceRef};
use crate::error::{Error, Result};

/// One superpixel of one crop at one resolution.
#[derive(Debug, Clone)]
pub struct SuperpixelPatch {
    pub source: SliceRef,
    /// `n_segments` of the run that produced this patch.
    pub resolution: usize,
    pub segment_id: u32,
    pub membership: Array2<bool>,
    pub rendered: Array2<f32>,
    pub fill_value: f32,
}

impl SuperpixelPatch {
    pub fn id(&self) -> String {
        patch_id(&self.source.id(), self.resolution, self.segment_id)
    }
}

pub fn patch_id(slice_id: &str, resolution: usize, segment_id: u32) -> String {
    format!("{slice_id}/r{resolution}/s{segment_id}")
}

/// Bilinear resampling with pixel-centre alignment; sampling positions are
/// clamped to the source grid, so edges replicate.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coords = |dst: usize, scale: f64, len: usize| {
        let p = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coords(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = f64::from(src[[y0, x0]]) * (1.0 - fx) + f64::from(src[[y0, x1]]) * fx;
        let bottom = f64::from(src[[y1, x0]]) * (1.0 - fx) + f64::from(src[[y1, x1]]) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Membership grids of each label, in label order.
pub fn segment_masks(labels: &Array2<u32>) -> Vec<Array2<bool>> {
    let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    (0..n as u32)
        .map(|s| labels.mapv(|l| l == s))
        .collect()
}

/// The crop with non-member pixels set to `fill_value`, resampled to
/// `target_size` x `target_size`.
pub fn render_segment(
    image: &Array2<f32>,
    membership: &Array2<bool>,
    fill_value: f32,
    target_size: usize,
) -> Array2<f32> {
    let mut masked = image.clone();
    masked.zip_mut_with(membership, |v, &m| {
        if !m {
            *v = fill_value;
        }
    });
    resize_bilinear(&masked, target_size, target_size)
}

/// Segments a cropped slice at every configured resolution and renders each
/// segment. The fill value is the mean intensity of the crop.
pub fn extract_patches(
    record: &SliceRecord,
    params: &SlicParams,
    target_size: usize,
) -> Result<Vec<SuperpixelPatch>> {
    params.validate()?;
    let (h, w) = record.dims();
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch {
            id: record.id(),
            detail: format!("crop {h}x{w} is smaller than 2x2"),
        });
    }
    if target_size == 0 {
        return Err(Error::InvalidParam("target_size must be positive".into()));
    }
    let fill_value = crop_mean(&record.image);
    let source = record.source();
    let mut out = Vec::new();
    for &resolution in &params.resolutions {
        let labels = slic(&record.image, &params.at_resolution(resolution))?;
        for (segment_id, membership) in segment_masks(&labels).into_iter().enumerate() {
            let rendered = render_segment(&record.image, &membership, fill_value, target_size);
            out.push(SuperpixelPatch {
                source: source.clone(),
                resolution,
                segment_id: segment_id as u32,
                membership,
                rendered,
                fill_value,
            });
        }
    }
    Ok(out)
}

pub(crate) fn crop_mean(image: &Array2<f32>) -> f32 {
    let sum: f64 = image.iter().map(|&v| f64::from(v)).sum();
    (sum / image.len().max(1) as f64) as f32
}
