//! Synthetic slices with planted latent structure, for demos, tests and
//! benchmarks.

use std::f32::consts::TAU;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Pathology, Phase, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
    /// Amplitude of the blob-specific intensity pattern.
    pub amplitude: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_patients: 20,
            slices_per_patient: 10,
            size: 64,
            amplitude: 0.3,
            noise: 0.02,
            seed: 0,
        }
    }
}

/// Pathology label carried by each planted blob.
pub const BLOB_CLASSES: [Pathology; 3] = [Pathology::MINF, Pathology::DCM, Pathology::NOR];

/// Blob of patient `p` out of `n`: patients are split into three contiguous
/// groups of near-equal size.
pub fn blob_of_patient(p: usize, n: usize) -> usize {
    (p * 3) / n.max(1)
}

fn pattern(blob: usize, r: usize, c: usize, size: usize) -> f32 {
    let (y, x) = (r as f32 / size as f32, c as f32 / size as f32);
    match blob {
        0 => (TAU * x).sin(),
        1 => (TAU * y).sin(),
        _ => 0.0,
    }
}

/// Heart-like mask: LV disc, myocardial ring and an RV crescent, spanning
/// most of the image.
fn synthetic_mask(size: usize) -> Array2<u8> {
    let c = (size as f64 - 1.0) / 2.0;
    let unit = size as f64 / 64.0;
    Array2::from_shape_fn((size, size), |(r, col)| {
        let (dy, dx) = (r as f64 - c, col as f64 - c);
        let rho = (dy * dy + dx * dx).sqrt();
        let rv_rho = (dy * dy + (dx + 10.0 * unit).powi(2)).sqrt();
        if rho <= 12.0 * unit {
            3
        } else if rho <= 18.0 * unit {
            2
        } else if rv_rho <= 30.0 * unit && dx < 0.0 {
            1
        } else {
            0
        }
    })
}

/// Three groups of patients whose images carry one of two sinusoidal patterns
/// or none (flat gray). Every image is `0.5 + amplitude * pattern + noise`.
/// The flat group's normalized images are symmetric about their mean, so
/// under a zero-sum linear encoder its latents are centered at the origin.
pub fn planted_blobs(config: &PlantedConfig) -> Result<Vec<SliceRecord>> {
    if config.n_patients < 3 || config.slices_per_patient == 0 || config.size < 8 {
        return Err(Error::InvalidParam(
            "planted dataset needs at least 3 patients, 1 slice each, 8x8 images".into(),
        ));
    }
    let normal = Normal::new(0.0f32, config.noise.max(0.0))
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mask = synthetic_mask(config.size);
    let mut records = Vec::with_capacity(config.n_patients * config.slices_per_patient);
    for p in 0..config.n_patients {
        let blob = blob_of_patient(p, config.n_patients);
        for s in 0..config.slices_per_patient {
            let mut r = rng(derive_seed(config.seed, "planted", &[p as u64, s as u64]));
            let image = Array2::from_shape_fn((config.size, config.size), |(row, col)| {
                0.5 + config.amplitude * pattern(blob, row, col, config.size) + normal.sample(&mut r)
            });
            records.push(SliceRecord {
                patient_id: format!("patient{p:03}"),
                slice_index: s as u32,
                phase: Phase::ED,
                pathology: BLOB_CLASSES[blob],
                split: Split::Train,
                image: crate::dataset::normalize_intensity(&image),
                mask: mask.clone(),
                pixel_spacing: [1.0, 1.0],
            });
        }
    }
    Ok(records)
}
