#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tcav_core::adapter::{AnalyticParams, AnalyticReference, Head, Target};
use tcav_core::dataset::{write_manifest, LabelEncoding, Pathology};
use tcav_core::pipeline::{AdapterSpec, Pipeline, PipelineConfig};
use tcav_core::superpixel::SlicParams;
use tcav_core::synth::{planted_blobs, PlantedConfig};

pub const EPSILON: f64 = 0.05;
pub const LATENT_DIM: usize = 64;

/// Writes the 200-image planted dataset and returns its manifest path.
pub fn planted_manifest(dir: &Path) -> PathBuf {
    let records = planted_blobs(&PlantedConfig::default()).unwrap();
    assert_eq!(records.len(), 200);
    write_manifest(&dir.join("data"), &records, LabelEncoding::default()).unwrap()
}

/// One whole-crop patch per image, 64x64 inputs, analytic adapter.
pub fn planted_config(manifest: PathBuf, heads: std::collections::BTreeMap<Target, Head>) -> PipelineConfig {
    PipelineConfig {
        manifest,
        input_size: 64,
        slic: SlicParams { resolutions: vec![1], n_segments: 1, ..SlicParams::default() },
        adapter: AdapterSpec::AnalyticReference { latent_dim: LATENT_DIM, epsilon: EPSILON, seed: 0, heads },
        ..PipelineConfig::default()
    }
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn mean(rows: &[&Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

/// Head for the gradient target whose linear part points from the global
/// latent centroid to the centroid of the MINF (blob-1) patches. The
/// curvature is the adapter's own.
pub fn aligned_head(manifest: &Path, work: &Path) -> Head {
    let probe = Pipeline::new(planted_config(manifest.to_path_buf(), Default::default()), work).unwrap();
    let emb = probe.embed().unwrap();
    let prepared = probe.prepare().unwrap();
    let patches = probe.patches().unwrap();
    let all: Vec<&Vec<f64>> = emb.latents.iter().collect();
    let blob1: Vec<&Vec<f64>> = patches
        .entries
        .iter()
        .zip(&emb.latents)
        .filter(|(e, _)| prepared.records[e.slice].pathology == Pathology::MINF)
        .map(|(_, l)| l)
        .collect();
    let (c1, cg) = (mean(&blob1), mean(&all));
    let linear = unit(c1.iter().zip(&cg).map(|(a, b)| a - b).collect());
    let reference = AnalyticReference::new(AnalyticParams {
        input_size: 64,
        latent_dim: LATENT_DIM,
        epsilon: EPSILON,
        seed: 0,
    })
    .unwrap();
    Head { linear, diagonal: reference.head(Target::ForegroundSum).diagonal.clone() }
}

/// Seeded vector with the span of `directions` projected out, normalized.
pub fn orthogonal_to(directions: &[Vec<f64>], seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let d = directions[0].len();
    // Orthonormal basis of the span by modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in directions {
        let mut u = v.clone();
        for b in &basis {
            let p: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    for _ in 0..2 {
        for b in &basis {
            let p: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    unit(w)
}
