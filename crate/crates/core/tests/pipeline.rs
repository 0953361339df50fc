mod common;

use std::collections::BTreeMap;

use common::*;
use ndarray::Array2;
use tcav_core::adapter::{stack_rows, write_tensor_dir, AnalyticParams, AnalyticReference, Target};
use tcav_core::dataset::{write_manifest, LabelEncoding, Split};
use tcav_core::pipeline::{
    render_patch, run_pipeline, AdapterSpec, ClustersFile, MetricsFile, Pipeline, PredictionIndex, Stage,
};
use tcav_core::superpixel::resize_bilinear;
use tcav_core::synth::{planted_blobs, PlantedConfig};
use tcav_core::tcav::TcavResult;
use tcav_core::Error;

fn small_manifest(dir: &std::path::Path) -> std::path::PathBuf {
    let records = planted_blobs(&PlantedConfig { n_patients: 9, slices_per_patient: 10, ..Default::default() }).unwrap();
    write_manifest(&dir.join("data"), &records, LabelEncoding::default()).unwrap()
}

fn read<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn unchanged_stages_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted_config(small_manifest(dir.path()), Default::default());
    let out = dir.path().join("out");
    let first = run_pipeline(&cfg, &out).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    let before = std::fs::read(out.join("results.json")).unwrap();

    let second = run_pipeline(&cfg, &out).unwrap();
    assert_eq!(second.executed, vec![Stage::Report]);
    assert_eq!(second.cached.len(), 6);
    assert_eq!(before, std::fs::read(out.join("results.json")).unwrap());

    let changed = tcav_core::pipeline::PipelineConfig { alpha: 0.01, ..cfg };
    let third = run_pipeline(&changed, &out).unwrap();
    assert_eq!(third.executed, vec![Stage::Score, Stage::Report]);
}

#[test]
fn empty_manifest_fails_at_prepare_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(&dir.path().join("data"), &[], LabelEncoding::default()).unwrap();
    let out = dir.path().join("out");
    let err = run_pipeline(&planted_config(manifest, Default::default()), &out).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "prepare", .. }), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_stage_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&planted_config(dir.path().join("nope.json"), Default::default()), &dir.path().join("o"))
        .unwrap_err();
    assert!(err.to_string().starts_with("stage `prepare` failed"), "{err}");
}

#[test]
fn report_accounts_for_every_patch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_pipeline(&planted_config(small_manifest(dir.path()), Default::default()), &out).unwrap();
    let clusters: ClustersFile = read(&out.join("clusters.json"));
    let sizes: usize = clusters.clusters.iter().map(|c| c.size).sum();
    assert_eq!(sizes + clusters.outliers_removed, clusters.total_patches);
    assert_eq!(clusters.total_patches, 90);
    let pct: f64 = clusters.clusters.iter().map(|c| c.percentage).sum();
    assert!((pct - 100.0 * sizes as f64 / 90.0).abs() < 1e-9);

    let index = std::fs::read_to_string(out.join("report/index.html")).unwrap();
    for c in &clusters.clusters {
        assert!(index.contains(&format!("cluster_{}.html", c.cluster_id)));
        assert!(out.join("report").join(c.detail_page()).is_file());
        for img in &c.images {
            assert!(out.join("report").join(img).is_file());
        }
    }
    let results: Vec<TcavResult> = read(&out.join("results.json"));
    for r in &results {
        assert_eq!(r.n_trials, 100);
        assert_eq!(r.score.is_none(), r.status == tcav_core::tcav::TcavStatus::Degenerate);
    }
    let metrics: MetricsFile = read(&out.join("metrics.json"));
    assert_eq!(metrics.patches, 90);
    assert!(metrics.dice.is_empty());
}

#[test]
fn file_backed_adapter_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(dir.path());
    let cfg = planted_config(manifest.clone(), Default::default());
    let analytic_out = dir.path().join("analytic");
    run_pipeline(&cfg, &analytic_out).unwrap();

    // Export what an external model would: one row per patch and per slice.
    let model = AnalyticReference::new(AnalyticParams { input_size: 64, latent_dim: LATENT_DIM, epsilon: EPSILON, seed: 0 }).unwrap();
    let p = Pipeline::new(cfg.clone(), &analytic_out).unwrap();
    let (prepared, patches) = (p.prepare().unwrap(), p.patches().unwrap());
    let mut ids = Vec::new();
    let mut images: Vec<Array2<f32>> = Vec::new();
    for e in &patches.entries {
        ids.push(e.patch_id.clone());
        images.push(render_patch(prepared, patches, e, 64));
    }
    for r in &prepared.records {
        ids.push(r.id());
        images.push(resize_bilinear(&r.image, 64, 64));
    }
    let acts: Vec<Vec<f64>> = images.iter().map(|im| model.encode(im.view())).collect();
    let grads: Vec<Vec<f64>> = acts.iter().map(|a| model.head_gradient(a, Target::ForegroundSum)).collect();
    let tensors = dir.path().join("tensors");
    let g: BTreeMap<_, _> = [(Target::ForegroundSum, stack_rows(&grads, LATENT_DIM).unwrap())].into_iter().collect();
    write_tensor_dir(&tensors, &ids, &stack_rows(&acts, LATENT_DIM).unwrap(), &g).unwrap();

    let file_cfg = tcav_core::pipeline::PipelineConfig { adapter: AdapterSpec::FileBacked { dir: tensors }, ..cfg };
    let file_out = dir.path().join("file");
    run_pipeline(&file_cfg, &file_out).unwrap();
    let a: ClustersFile = read(&analytic_out.join("clusters.json"));
    let b: ClustersFile = read(&file_out.join("clusters.json"));
    assert_eq!(a.chosen_k, b.chosen_k);
    let sizes = |c: &ClustersFile| c.clusters.iter().map(|e| e.size).collect::<Vec<_>>();
    assert_eq!(sizes(&a), sizes(&b));
}

#[test]
fn dice_from_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(dir.path());
    let records = tcav_core::dataset::load_manifest(&manifest).unwrap();
    let preds = dir.path().join("preds");
    let mut masks = BTreeMap::new();
    for (i, r) in records.iter().enumerate().take(5) {
        let file = std::path::PathBuf::from(format!("{i}.npy"));
        tcav_core::npy::write(&preds.join(&file), &r.mask).unwrap();
        masks.insert(r.id(), file);
    }
    std::fs::write(preds.join("index.json"), serde_json::to_string(&PredictionIndex { masks }).unwrap()).unwrap();
    let cfg = tcav_core::pipeline::PipelineConfig { predictions: Some(preds), ..planted_config(manifest, Default::default()) };
    let out = dir.path().join("out");
    run_pipeline(&cfg, &out).unwrap();
    let metrics: MetricsFile = read(&out.join("metrics.json"));
    assert_eq!(metrics.dice.len(), 1);
    assert_eq!(metrics.dice[0].dataset, Split::Train);
    assert_eq!(metrics.dice[0].global, 100.0);
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = tcav_core::pipeline::PipelineConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<tcav_core::pipeline::PipelineConfig>(&text).unwrap(), cfg);
    let partial: tcav_core::pipeline::PipelineConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.n_random_trials, 100);
    assert!(serde_json::from_str::<tcav_core::pipeline::PipelineConfig>(r#"{"sed": 4}"#).is_err());
    let bad = tcav_core::pipeline::PipelineConfig { n_concept_cavs: 1, ..cfg };
    assert!(Pipeline::new(bad, "x").is_err());
}
