//! End-to-end orchestration. Each stage persists its artifact under
//! `<out>/stages/<name>/` together with a stamp: the sha256 of the stage's
//! configuration and its upstream stamp (the first stage also hashes the
//! manifest and every array it references). A stage whose stamp matches is
//! loaded from disk instead of recomputed.

use std::cell::OnceCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AnalyticParams, AnalyticReference, FileBacked, GradientVector, Head, ModelAdapter, ModelInput, Target};
use crate::cav::{fit_cav, read_cav_store, write_cav_store, Cav, CavKind, CavParams};
use crate::concept::{sample_counterpart, select_concepts, Concept, SelectionConfig};
use crate::dataset::{self, Pathology, PresenceSubgroup, RoiBox, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::latent::{
    elbow_scan, elbow_select, reduce, remove_outliers, size_stats, summarize, ClusterSummary, ElbowChoice,
    ElbowCurve, KMeansParams, PatchMeta, Reduction, SizeStats,
};
use crate::metrics::{dice_report, DiceReport, EmptyPolicy};
use crate::npy;
use crate::par;
use crate::report::{render_report, write_png, ClassCell, ClusterReportEntry, ReportContext};
use crate::seed::derive_seed;
use crate::superpixel::{render_segment, segment_masks, slic, SlicParams};
use crate::tcav::{score_concept, score_spread, SpreadSummary, TcavResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    AnalyticReference {
        #[serde(default = "default_latent_dim")]
        latent_dim: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default)]
        seed: u64,
        /// Replacement heads, e.g. to plant a known gradient direction.
        #[serde(default)]
        heads: BTreeMap<Target, Head>,
    },
    FileBacked {
        dir: PathBuf,
    },
}

fn default_latent_dim() -> usize {
    AnalyticParams::default().latent_dim
}

fn default_epsilon() -> f64 {
    AnalyticParams::default().epsilon
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec::AnalyticReference {
            latent_dim: default_latent_dim(),
            epsilon: default_epsilon(),
            seed: 0,
            heads: BTreeMap::new(),
        }
    }
}

impl AdapterSpec {
    pub fn build(&self, input_size: usize) -> Result<Box<dyn ModelAdapter>> {
        match self {
            AdapterSpec::AnalyticReference { latent_dim, epsilon, seed, heads } => {
                let mut model = AnalyticReference::new(AnalyticParams {
                    input_size,
                    latent_dim: *latent_dim,
                    epsilon: *epsilon,
                    seed: *seed,
                })?;
                for (target, head) in heads {
                    model.set_head(*target, head.clone())?;
                }
                Ok(Box::new(model))
            }
            AdapterSpec::FileBacked { dir } => Ok(Box::new(FileBacked::open(dir, input_size)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    /// Side of the square network input every patch and example is resized to.
    pub input_size: usize,
    pub roi_margin: f64,
    /// Split whose slices are fragmented into patches and used as class examples.
    pub split: Split,
    pub slic: SlicParams,
    pub reduction: Reduction,
    pub k_min: usize,
    /// Upper end of the k scan; defaults to `min(100, patches / 10)`.
    pub k_max: Option<usize>,
    pub outlier_quantile: f64,
    pub selection: SelectionConfig,
    pub cav: CavParams,
    pub n_concept_cavs: usize,
    pub n_random_trials: usize,
    pub alpha: f64,
    /// Also fit and score clusters that failed concept selection.
    pub score_unselected: bool,
    pub gradient_target: Target,
    /// Classes to score; defaults to every class present in the split.
    pub classes: Option<Vec<Pathology>>,
    pub adapter: AdapterSpec,
    /// Directory with predicted masks for the Dice summary (optional).
    pub predictions: Option<PathBuf>,
    pub empty_policy: EmptyPolicy,
    pub model_tag: String,
    pub thumbnails: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            manifest: PathBuf::from("manifest.json"),
            input_size: 348,
            roi_margin: 0.1,
            split: Split::Train,
            slic: SlicParams::default(),
            reduction: Reduction::default(),
            k_min: 2,
            k_max: None,
            outlier_quantile: 0.95,
            selection: SelectionConfig::default(),
            cav: CavParams::default(),
            n_concept_cavs: 10,
            n_random_trials: 100,
            alpha: 0.05,
            score_unselected: true,
            gradient_target: Target::ForegroundSum,
            classes: None,
            adapter: AdapterSpec::default(),
            predictions: None,
            empty_policy: EmptyPolicy::default(),
            model_tag: "model".into(),
            thumbnails: 6,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Resolves relative paths against `base` (normally the config file's
    /// directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        if let Some(p) = self.predictions.as_mut() {
            fix(p);
        }
        if let AdapterSpec::FileBacked { dir } = &mut self.adapter {
            fix(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slic.validate()?;
        self.selection.validate()?;
        if self.input_size < 2 {
            return Err(Error::InvalidParam("input_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.roi_margin) {
            return Err(Error::InvalidParam("roi_margin must lie in [0, 1]".into()));
        }
        if self.k_min < 2 || self.k_max.is_some_and(|m| m < self.k_min + 2) {
            return Err(Error::InvalidParam("k scan needs k_min >= 2 and at least 3 values".into()));
        }
        if !(self.outlier_quantile > 0.0 && self.outlier_quantile <= 1.0) {
            return Err(Error::InvalidParam("outlier_quantile must lie in (0, 1]".into()));
        }
        if self.n_concept_cavs < 2 || self.n_random_trials < 2 {
            return Err(Error::InvalidParam("need at least 2 concept CAVs and 2 random trials".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParam("alpha must lie in (0, 1)".into()));
        }
        if !(self.cav.holdout_fraction > 0.0 && self.cav.holdout_fraction < 1.0) || !(self.cav.l2 > 0.0) {
            return Err(Error::InvalidParam("cav needs holdout_fraction in (0, 1) and l2 > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Patches,
    Embed,
    Cluster,
    Cavs,
    Score,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Prepare, Stage::Patches, Stage::Embed, Stage::Cluster, Stage::Cavs, Stage::Score, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Patches => "patches",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Cavs => "cavs",
            Stage::Score => "score",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown stage `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PreparedMeta {
    patient_id: String,
    slice_index: u32,
    phase: dataset::Phase,
    pathology: Pathology,
    split: Split,
    pixel_spacing: [f64; 2],
    roi: RoiBox,
}

/// ROI-cropped slices of the configured split.
pub struct Prepared {
    pub records: Vec<SliceRecord>,
    pub rois: Vec<RoiBox>,
    pub heart_pixel_ratio: f64,
    pub presence: BTreeMap<PresenceSubgroup, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch_id: String,
    /// Index into the prepared records.
    pub slice: usize,
    pub resolution: usize,
    pub segment_id: u32,
    pub fill_value: f32,
}

pub struct Patches {
    pub entries: Vec<PatchEntry>,
    /// Segment label map per (slice, resolution).
    pub labels: BTreeMap<(usize, usize), Array2<u32>>,
}

pub struct Embedding {
    pub patch_ids: Vec<String>,
    pub latents: Vec<Vec<f64>>,
    pub examples: BTreeMap<Pathology, Vec<GradientVector>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub reduced_dim: usize,
    pub curve: ElbowCurve,
    pub choice: ElbowChoice,
    pub assignments: Vec<Option<usize>>,
    pub outliers_removed: usize,
    pub summaries: Vec<ClusterSummary>,
    pub size_stats: Option<SizeStats>,
}

pub struct CavSet {
    pub concepts: Vec<Concept>,
    pub cavs: Vec<Cav>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub classes: Vec<Pathology>,
    pub results: Vec<TcavResult>,
    pub spread: SpreadSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersFile {
    pub total_patches: usize,
    pub chosen_k: usize,
    pub no_elbow: bool,
    pub elbow: ElbowCurve,
    pub outliers_removed: usize,
    pub size_stats: Option<SizeStats>,
    pub clusters: Vec<ClusterReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub slices: usize,
    pub patches: usize,
    pub heart_pixel_ratio: f64,
    pub presence: BTreeMap<PresenceSubgroup, f64>,
    pub score_spread: SpreadSummary,
    /// Significance tests run, uncorrected for multiple comparisons.
    pub n_tests: usize,
    pub dice: Vec<DiceReport>,
}

/// Which stages were recomputed and which were reused from disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLog {
    pub executed: Vec<Stage>,
    pub cached: Vec<Stage>,
}

// ---------------------------------------------------------------------------
// Helpers

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn hash_json<T: Serialize>(hasher: &mut Sha256, value: &T) {
    hasher.update(serde_json::to_vec(value).expect("config values serialize"));
    hasher.update([0u8]);
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
    Ok(())
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

fn from_matrix(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

const STAMP_FILE: &str = "stamp.txt";

/// Rebuilds the network input of one patch from the crop and its label map.
pub fn render_patch(prepared: &Prepared, patches: &Patches, entry: &PatchEntry, size: usize) -> Array2<f32> {
    let labels = &patches.labels[&(entry.slice, entry.resolution)];
    let membership = labels.mapv(|l| l == entry.segment_id);
    render_segment(&prepared.records[entry.slice].image, &membership, entry.fill_value, size)
}

const EMBED_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Pipeline

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    adapter: OnceCell<Box<dyn ModelAdapter>>,
    stamps: OnceCell<BTreeMap<Stage, String>>,
    prepared: OnceCell<Prepared>,
    patches: OnceCell<Patches>,
    embedding: OnceCell<Embedding>,
    clustering: OnceCell<Clustering>,
    cavs: OnceCell<CavSet>,
    scores: OnceCell<Scores>,
    log: std::cell::RefCell<RunLog>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Pipeline> {
        config.validate()?;
        Ok(Pipeline {
            config,
            out: out.into(),
            adapter: OnceCell::new(),
            stamps: OnceCell::new(),
            prepared: OnceCell::new(),
            patches: OnceCell::new(),
            embedding: OnceCell::new(),
            clustering: OnceCell::new(),
            cavs: OnceCell::new(),
            scores: OnceCell::new(),
            log: Default::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn log(&self) -> RunLog {
        self.log.borrow().clone()
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join("stages").join(stage.name())
    }

    fn adapter(&self) -> Result<&dyn ModelAdapter> {
        if self.adapter.get().is_none() {
            let a = self.config.adapter.build(self.config.input_size)?;
            let _ = self.adapter.set(a);
        }
        Ok(self.adapter.get().expect("set above").as_ref())
    }

    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::Prepare => serde_json::json!({ "roi_margin": c.roi_margin, "split": c.split }),
            Stage::Patches => serde_json::json!({ "slic": c.slic, "input_size": c.input_size }),
            Stage::Embed => serde_json::json!({
                "adapter": c.adapter, "gradient_target": c.gradient_target, "classes": c.classes,
            }),
            Stage::Cluster => serde_json::json!({
                "seed": c.seed, "reduction": c.reduction, "k_min": c.k_min, "k_max": c.k_max,
                "outlier_quantile": c.outlier_quantile,
            }),
            Stage::Cavs => serde_json::json!({
                "seed": c.seed, "selection": c.selection, "cav": c.cav, "n_concept_cavs": c.n_concept_cavs,
                "n_random_trials": c.n_random_trials, "score_unselected": c.score_unselected,
            }),
            Stage::Score => serde_json::json!({ "alpha": c.alpha }),
            Stage::Report => serde_json::json!({
                "predictions": c.predictions, "empty_policy": c.empty_policy, "model_tag": c.model_tag,
                "thumbnails": c.thumbnails,
            }),
        }
    }

    fn stamps(&self) -> Result<&BTreeMap<Stage, String>> {
        if self.stamps.get().is_none() {
            let mut upstream = {
                let mut h = Sha256::new();
                hash_file(&mut h, &self.config.manifest)?;
                let records = read_json::<dataset::Manifest>(&self.config.manifest)?.records;
                let base = self.config.manifest.parent().unwrap_or(Path::new("."));
                for r in &records {
                    hash_file(&mut h, &base.join(&r.image_path))?;
                    hash_file(&mut h, &base.join(&r.mask_path))?;
                }
                hex::encode(h.finalize())
            };
            let mut out = BTreeMap::new();
            for stage in Stage::ALL {
                let mut h = Sha256::new();
                h.update(stage.name());
                hash_json(&mut h, &self.stage_config(stage));
                h.update(&upstream);
                upstream = hex::encode(h.finalize());
                out.insert(stage, upstream.clone());
            }
            let _ = self.stamps.set(out);
        }
        Ok(self.stamps.get().expect("set above"))
    }

    fn is_fresh(&self, stage: Stage) -> Result<bool> {
        let expected = &self.stamps()?[&stage];
        let path = self.stage_dir(stage).join(STAMP_FILE);
        Ok(std::fs::read_to_string(path).is_ok_and(|s| s.trim() == expected))
    }

    /// Clears the stage directory before recomputation.
    fn begin(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let stamp = dir.join(STAMP_FILE);
        if stamp.exists() {
            std::fs::remove_file(&stamp).map_err(|e| Error::io(&stamp, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn commit(&self, stage: Stage) -> Result<()> {
        let path = self.stage_dir(stage).join(STAMP_FILE);
        std::fs::write(&path, format!("{}\n", self.stamps()?[&stage])).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn cached<'a, T>(
        &'a self,
        cell: &'a OnceCell<T>,
        stage: Stage,
        load: impl FnOnce(&Path) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<&'a T> {
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let tagged = |e: Error| e.in_stage(stage.name());
        let value = if self.is_fresh(stage).map_err(tagged)? {
            log::info!("stage {stage}: up to date");
            self.log.borrow_mut().cached.push(stage);
            load(&self.stage_dir(stage)).map_err(tagged)?
        } else {
            log::info!("stage {stage}: running");
            let v = compute().map_err(tagged)?;
            self.commit(stage).map_err(tagged)?;
            self.log.borrow_mut().executed.push(stage);
            v
        };
        let _ = cell.set(value);
        Ok(cell.get().expect("set above"))
    }

    // -- prepare ------------------------------------------------------------

    pub fn prepare(&self) -> Result<&Prepared> {
        self.cached(&self.prepared, Stage::Prepare, |dir| self.load_prepared(dir), || self.compute_prepared())
    }

    fn compute_prepared(&self) -> Result<Prepared> {
        let all = dataset::load_manifest(&self.config.manifest)?;
        if all.is_empty() {
            return Err(Error::Empty(format!("manifest {} lists no slices", self.config.manifest.display())));
        }
        let records: Vec<SliceRecord> = all.into_iter().filter(|r| r.split == self.config.split).collect();
        if records.is_empty() {
            return Err(Error::Empty(format!("no slices in the {:?} split", self.config.split)));
        }
        let heart_pixel_ratio = dataset::heart_pixel_ratio(&records, None)?;
        let presence = dataset::presence_distribution(&records)?;
        let cropped = dataset::crop_all(&records, self.config.roi_margin)?;

        let dir = self.begin(Stage::Prepare)?;
        let mut metas = Vec::with_capacity(cropped.len());
        for (i, (r, roi)) in cropped.iter().enumerate() {
            npy::write(&dir.join(format!("crops/{i:05}_image.npy")), &r.image)?;
            npy::write(&dir.join(format!("crops/{i:05}_mask.npy")), &r.mask)?;
            metas.push(PreparedMeta {
                patient_id: r.patient_id.clone(),
                slice_index: r.slice_index,
                phase: r.phase,
                pathology: r.pathology,
                split: r.split,
                pixel_spacing: r.pixel_spacing,
                roi: *roi,
            });
        }
        write_json(&dir.join("prepared.json"), &(metas, heart_pixel_ratio, &presence))?;
        let (records, rois) = cropped.into_iter().unzip();
        Ok(Prepared { records, rois, heart_pixel_ratio, presence })
    }

    fn load_prepared(&self, dir: &Path) -> Result<Prepared> {
        let (metas, heart_pixel_ratio, presence): (Vec<PreparedMeta>, f64, BTreeMap<PresenceSubgroup, f64>) =
            read_json(&dir.join("prepared.json"))?;
        let mut records = Vec::with_capacity(metas.len());
        let mut rois = Vec::with_capacity(metas.len());
        for (i, m) in metas.into_iter().enumerate() {
            records.push(SliceRecord {
                patient_id: m.patient_id,
                slice_index: m.slice_index,
                phase: m.phase,
                pathology: m.pathology,
                split: m.split,
                image: npy::read(&dir.join(format!("crops/{i:05}_image.npy")))?,
                mask: npy::read(&dir.join(format!("crops/{i:05}_mask.npy")))?,
                pixel_spacing: m.pixel_spacing,
            });
            rois.push(m.roi);
        }
        Ok(Prepared { records, rois, heart_pixel_ratio, presence })
    }

    // -- patches ------------------------------------------------------------

    pub fn patches(&self) -> Result<&Patches> {
        let prepared = self.prepare()?;
        self.cached(&self.patches, Stage::Patches, |dir| self.load_patches(dir), || self.compute_patches(prepared))
    }

    fn compute_patches(&self, prepared: &Prepared) -> Result<Patches> {
        let slic_params = &self.config.slic;
        let per_slice = par::try_map_range(prepared.records.len(), |i| {
            let r = &prepared.records[i];
            let (h, w) = r.dims();
            if h < 2 || w < 2 {
                return Err(Error::ShapeMismatch { id: r.id(), detail: format!("crop {h}x{w} is smaller than 2x2") });
            }
            let fill_value = crate::superpixel::crop_mean(&r.image);
            let mut entries = Vec::new();
            let mut labels = Vec::new();
            for &res in &slic_params.resolutions {
                let map = slic(&r.image, &slic_params.at_resolution(res))
                    .map_err(|e| Error::InvalidParam(format!("{}: {e}", r.id())))?;
                let n = segment_masks(&map).len();
                for s in 0..n as u32 {
                    entries.push(PatchEntry {
                        patch_id: crate::superpixel::patch_id(&r.id(), res, s),
                        slice: i,
                        resolution: res,
                        segment_id: s,
                        fill_value,
                    });
                }
                labels.push(((i, res), map));
            }
            Ok((entries, labels))
        })?;
        let dir = self.begin(Stage::Patches)?;
        let mut entries = Vec::new();
        let mut labels = BTreeMap::new();
        for (e, l) in per_slice {
            entries.extend(e);
            for ((i, res), map) in l {
                npy::write(&dir.join(format!("labels/{i:05}_r{res}.npy")), &map)?;
                labels.insert((i, res), map);
            }
        }
        if entries.is_empty() {
            return Err(Error::Empty("superpixel stage produced no patches".into()));
        }
        write_json(&dir.join("patches.json"), &entries)?;
        Ok(Patches { entries, labels })
    }

    fn load_patches(&self, dir: &Path) -> Result<Patches> {
        let entries: Vec<PatchEntry> = read_json(&dir.join("patches.json"))?;
        let mut labels = BTreeMap::new();
        for e in &entries {
            let key = (e.slice, e.resolution);
            if !labels.contains_key(&key) {
                labels.insert(key, npy::read(&dir.join(format!("labels/{:05}_r{}.npy", e.slice, e.resolution)))?);
            }
        }
        Ok(Patches { entries, labels })
    }

    // -- embed --------------------------------------------------------------

    pub fn classes(&self) -> Result<Vec<Pathology>> {
        if let Some(c) = &self.config.classes {
            return Ok(c.clone());
        }
        let present: BTreeSet<Pathology> = self.prepare()?.records.iter().map(|r| r.pathology).collect();
        Ok(Pathology::ALL.into_iter().filter(|p| present.contains(p)).collect())
    }

    pub fn embed(&self) -> Result<&Embedding> {
        let patches = self.patches()?;
        let prepared = self.prepare()?;
        self.cached(&self.embedding, Stage::Embed, |dir| self.load_embedding(dir), || {
            self.compute_embedding(prepared, patches)
        })
    }

    fn compute_embedding(&self, prepared: &Prepared, patches: &Patches) -> Result<Embedding> {
        let adapter = self.adapter()?;
        let size = self.config.input_size;
        if adapter.input_size() != size {
            return Err(Error::InvalidParam(format!(
                "adapter expects {}x{} inputs but input_size is {size}",
                adapter.input_size(),
                adapter.input_size()
            )));
        }
        let mut patch_ids = Vec::with_capacity(patches.entries.len());
        let mut latents = Vec::with_capacity(patches.entries.len());
        for chunk in patches.entries.chunks(EMBED_CHUNK) {
            let images = par::map(chunk, |e| render_patch(prepared, patches, e, size));
            let inputs: Vec<ModelInput> = chunk
                .iter()
                .zip(&images)
                .map(|(e, img)| ModelInput { id: &e.patch_id, image: img.view() })
                .collect();
            for v in adapter.activations(&inputs)? {
                patch_ids.push(v.id);
                latents.push(v.values);
            }
        }

        let mut examples = BTreeMap::new();
        for class_k in self.classes()? {
            let members: Vec<&SliceRecord> = prepared.records.iter().filter(|r| r.pathology == class_k).collect();
            if members.is_empty() {
                return Err(Error::MissingExample(format!("no {class_k} slices in the {:?} split", self.config.split)));
            }
            let mut grads = Vec::with_capacity(members.len());
            for chunk in members.chunks(EMBED_CHUNK) {
                let ids: Vec<String> = chunk.iter().map(|r| r.id()).collect();
                let images = par::map(chunk, |r| crate::superpixel::resize_bilinear(&r.image, size, size));
                let inputs: Vec<ModelInput> =
                    ids.iter().zip(&images).map(|(id, img)| ModelInput { id, image: img.view() }).collect();
                grads.extend(adapter.gradients(&inputs, self.config.gradient_target)?);
            }
            examples.insert(class_k, grads);
        }

        let dir = self.begin(Stage::Embed)?;
        let dim = adapter.latent_dim();
        npy::write(&dir.join("activations.npy"), &to_matrix(&latents, dim))?;
        let mut example_ids = BTreeMap::new();
        for (k, g) in &examples {
            let rows: Vec<Vec<f64>> = g.iter().map(|v| v.values.clone()).collect();
            npy::write(&dir.join(format!("gradients_{k}.npy")), &to_matrix(&rows, dim))?;
            example_ids.insert(*k, g.iter().map(|v| v.id.clone()).collect::<Vec<_>>());
        }
        write_json(&dir.join("embed.json"), &(&patch_ids, &example_ids, self.config.gradient_target))?;
        Ok(Embedding { patch_ids, latents, examples })
    }

    fn load_embedding(&self, dir: &Path) -> Result<Embedding> {
        let (patch_ids, example_ids, target): (Vec<String>, BTreeMap<Pathology, Vec<String>>, Target) =
            read_json(&dir.join("embed.json"))?;
        let latents = from_matrix(&npy::read(&dir.join("activations.npy"))?);
        let mut examples = BTreeMap::new();
        for (k, ids) in example_ids {
            let rows = from_matrix(&npy::read(&dir.join(format!("gradients_{k}.npy")))?);
            let grads = ids.into_iter().zip(rows).map(|(id, values)| GradientVector { id, target, values }).collect();
            examples.insert(k, grads);
        }
        Ok(Embedding { patch_ids, latents, examples })
    }

    // -- cluster ------------------------------------------------------------

    pub fn cluster(&self) -> Result<&Clustering> {
        let embedding = self.embed()?;
        let prepared = self.prepare()?;
        let patches = self.patches()?;
        self.cached(&self.clustering, Stage::Cluster, |dir| read_json(&dir.join("clustering.json")), || {
            self.compute_clustering(prepared, patches, embedding)
        })
    }

    fn compute_clustering(&self, prepared: &Prepared, patches: &Patches, embedding: &Embedding) -> Result<Clustering> {
        let n = embedding.latents.len();
        let points = reduce(&embedding.latents, &self.config.reduction)?;
        let k_max = self.config.k_max.unwrap_or((n / 10).min(100));
        if k_max < self.config.k_min + 2 || k_max > n {
            return Err(Error::Insufficient(format!(
                "{n} patches support no k scan from {} to {k_max}",
                self.config.k_min
            )));
        }
        let ks: Vec<usize> = (self.config.k_min..=k_max).collect();
        let seed = derive_seed(self.config.seed, "cluster", &[]);
        let (curve, runs) = elbow_scan(&points, &ks, seed, KMeansParams::default())?;
        let choice = elbow_select(&curve)?;
        let run = &runs[ks.iter().position(|&k| k == choice.k).expect("chosen k was scanned")];
        let assignments = remove_outliers(&run.assignments, &points, &run.centroids, self.config.outlier_quantile);
        let metas: Vec<PatchMeta> = patches
            .entries
            .iter()
            .map(|e| {
                let r = &prepared.records[e.slice];
                PatchMeta { patch_id: e.patch_id.clone(), patient_id: r.patient_id.clone(), pathology: r.pathology }
            })
            .collect();
        let summaries = summarize(&assignments, &points, &run.centroids, &metas);
        let clustering = Clustering {
            reduced_dim: points.first().map_or(0, Vec::len),
            outliers_removed: assignments.iter().filter(|a| a.is_none()).count(),
            size_stats: size_stats(&summaries),
            curve,
            choice,
            assignments,
            summaries,
        };
        let dir = self.begin(Stage::Cluster)?;
        write_json(&dir.join("clustering.json"), &clustering)?;
        Ok(clustering)
    }

    // -- cavs ---------------------------------------------------------------

    pub fn fit_cavs(&self) -> Result<&CavSet> {
        let clustering = self.cluster()?;
        let embedding = self.embed()?;
        self.cached(&self.cavs, Stage::Cavs, |dir| {
            Ok(CavSet { concepts: read_json(&dir.join("concepts.json"))?, cavs: read_cav_store(&dir.join("store"))? })
        }, || self.compute_cavs(clustering, embedding))
    }

    fn compute_cavs(&self, clustering: &Clustering, embedding: &Embedding) -> Result<CavSet> {
        let concepts = select_concepts(&clustering.summaries, &self.config.selection)?;
        let pool = &embedding.latents;
        let jobs = cav_jobs(&concepts, pool.len(), &self.config);
        let params = self.config.cav;
        let cavs = par::try_map(&jobs, |job| job.run(pool, &params))?;
        let dir = self.begin(Stage::Cavs)?;
        write_json(&dir.join("concepts.json"), &concepts)?;
        write_cav_store(&dir.join("store"), &cavs)?;
        Ok(CavSet { concepts, cavs })
    }

    // -- score --------------------------------------------------------------

    pub fn score(&self) -> Result<&Scores> {
        let cavs = self.fit_cavs()?;
        let embedding = self.embed()?;
        self.cached(&self.scores, Stage::Score, |dir| read_json(&dir.join("scores.json")), || {
            self.compute_scores(cavs, embedding)
        })
    }

    fn compute_scores(&self, set: &CavSet, embedding: &Embedding) -> Result<Scores> {
        let classes = self.classes()?;
        let mut by_concept: BTreeMap<usize, (Vec<Cav>, Vec<Cav>)> = BTreeMap::new();
        for cav in &set.cavs {
            let e = by_concept.entry(cav.concept_id).or_default();
            match cav.kind {
                CavKind::Concept => e.0.push(cav.clone()),
                CavKind::Random => e.1.push(cav.clone()),
            }
        }
        let groups: Vec<(usize, Vec<Cav>, Vec<Cav>)> = by_concept.into_iter().map(|(c, (a, b))| (c, a, b)).collect();
        let alpha = self.config.alpha;
        let per_concept = par::try_map(&groups, |(id, concept_cavs, random_cavs)| {
            score_concept(*id, concept_cavs, random_cavs, &embedding.examples, &classes, alpha)
        })?;
        let results: Vec<TcavResult> = per_concept.into_iter().flatten().collect();
        let scores = Scores { spread: score_spread(&results), classes, results };
        let dir = self.begin(Stage::Score)?;
        write_json(&dir.join("scores.json"), &scores)?;
        write_json(&self.out.join("results.json"), &scores.results)?;
        Ok(scores)
    }

    // -- report -------------------------------------------------------------

    /// Writes `results.json`, `clusters.json`, `metrics.json` and `report/`.
    /// Always runs; it is cheap next to the stages it reads.
    pub fn report(&self) -> Result<()> {
        let scores = self.score()?;
        let tagged = |e: Error| e.in_stage(Stage::Report.name());
        self.write_outputs(scores).map_err(tagged)?;
        self.commit(Stage::Report).map_err(tagged)?;
        self.log.borrow_mut().executed.push(Stage::Report);
        Ok(())
    }

    fn write_outputs(&self, scores: &Scores) -> Result<()> {
        let prepared = self.prepare()?;
        let patches = self.patches()?;
        let clustering = self.cluster()?;
        let set = self.fit_cavs()?;
        std::fs::create_dir_all(self.stage_dir(Stage::Report)).map_err(|e| Error::io(self.stage_dir(Stage::Report), e))?;
        write_json(&self.out.join("results.json"), &scores.results)?;

        let total = patches.entries.len();
        let report_dir = self.out.join("report");
        let mut entries = Vec::with_capacity(clustering.summaries.len());
        for (summary, concept) in clustering.summaries.iter().zip(&set.concepts) {
            let images: Vec<String> =
                (0..summary.size).map(|j| format!("patches/{}/{j:04}.png", summary.cluster_id)).collect();
            let jobs: Vec<(usize, &String)> = summary.member_indices.iter().copied().zip(&images).collect();
            let size = self.config.input_size;
            par::try_map(&jobs, |(i, rel)| {
                let img = render_patch(prepared, patches, &patches.entries[*i], size);
                write_png(&report_dir.join(rel), &img)
            })?;
            let tcav = scores
                .results
                .iter()
                .filter(|r| r.concept_id == summary.cluster_id)
                .map(|r| (r.class_k, ClassCell::from_result(r)))
                .collect();
            entries.push(ClusterReportEntry {
                cluster_id: summary.cluster_id,
                size: summary.size,
                percentage: 100.0 * summary.size as f64 / total as f64,
                class_distribution: summary.per_pathology_counts.clone(),
                tcav,
                is_concept: concept.selected,
                rejection_reason: concept.rejection_reason,
                images,
                members: summary.member_patches.clone(),
            });
        }
        let n_tests = scores.results.iter().filter(|r| r.p_value.is_some()).count();
        let ctx = ReportContext {
            total_patches: total,
            chosen_k: clustering.choice.k,
            alpha: self.config.alpha,
            n_tests,
            thumbnails: self.config.thumbnails,
        };
        render_report(&entries, &ctx, &report_dir)?;
        write_json(
            &self.out.join("clusters.json"),
            &ClustersFile {
                total_patches: total,
                chosen_k: clustering.choice.k,
                no_elbow: clustering.choice.no_elbow,
                elbow: clustering.curve.clone(),
                outliers_removed: clustering.outliers_removed,
                size_stats: clustering.size_stats,
                clusters: entries,
            },
        )?;
        write_json(
            &self.out.join("metrics.json"),
            &MetricsFile {
                slices: prepared.records.len(),
                patches: total,
                heart_pixel_ratio: prepared.heart_pixel_ratio,
                presence: prepared.presence.clone(),
                score_spread: scores.spread.clone(),
                n_tests,
                dice: self.dice_reports()?,
            },
        )
    }

    fn dice_reports(&self) -> Result<Vec<DiceReport>> {
        let Some(dir) = &self.config.predictions else {
            return Ok(Vec::new());
        };
        let index: PredictionIndex = read_json(&dir.join("index.json"))?;
        let truth = dataset::load_manifest(&self.config.manifest)?;
        let mut by_split: BTreeMap<Split, Vec<(Array2<u8>, Array2<u8>)>> = BTreeMap::new();
        for r in truth {
            if let Some(file) = index.masks.get(&r.id()) {
                let pred: Array2<u8> = npy::read(&dir.join(file))?;
                by_split.entry(r.split).or_default().push((pred, r.mask));
            }
        }
        by_split
            .into_iter()
            .map(|(split, pairs)| {
                let refs: Vec<(&Array2<u8>, &Array2<u8>)> = pairs.iter().map(|(p, t)| (p, t)).collect();
                dice_report(&refs, split, &self.config.model_tag, self.config.empty_policy)
            })
            .collect()
    }

    /// Runs (or reuses) every stage up to and including `stage`.
    pub fn run_to(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Prepare => self.prepare().map(|_| ()),
            Stage::Patches => self.patches().map(|_| ()),
            Stage::Embed => self.embed().map(|_| ()),
            Stage::Cluster => self.cluster().map(|_| ()),
            Stage::Cavs => self.fit_cavs().map(|_| ()),
            Stage::Score => self.score().map(|_| ()),
            Stage::Report => self.report(),
        }
    }
}

/// Predicted masks for the Dice summary: slice id to NPY file (canonical
/// label codes), relative to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub masks: BTreeMap<String, PathBuf>,
}

/// One CAV fit scheduled by the cavs stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CavJob {
    pub concept_id: usize,
    pub kind: CavKind,
    pub seed: u64,
    pub members: Vec<usize>,
    pub size: usize,
}

/// Concept CAVs pit the members against a same-size sample of the other
/// patches; random CAVs pit two disjoint same-size samples of all patches
/// against each other. Sizes shrink when the pool is too small.
pub fn cav_jobs(concepts: &[Concept], pool: usize, config: &PipelineConfig) -> Vec<CavJob> {
    let mut jobs = Vec::new();
    for c in concepts {
        if !c.selected && !config.score_unselected {
            continue;
        }
        let m = c.member_indices.len();
        if m < 4 || pool - m < 2 {
            log::warn!("cluster {} has too few members or counterparts to fit CAVs", c.cluster_id);
            continue;
        }
        let id = c.cluster_id as u64;
        for j in 0..config.n_concept_cavs {
            jobs.push(CavJob {
                concept_id: c.cluster_id,
                kind: CavKind::Concept,
                seed: derive_seed(config.seed, "counterpart", &[id, j as u64]),
                members: c.member_indices.clone(),
                size: m.min(pool - m),
            });
        }
        for t in 0..config.n_random_trials {
            jobs.push(CavJob {
                concept_id: c.cluster_id,
                kind: CavKind::Random,
                seed: derive_seed(config.seed, "random-trial", &[id, t as u64]),
                members: Vec::new(),
                size: m.min(pool / 2),
            });
        }
    }
    jobs
}

impl CavJob {
    pub fn run(&self, pool: &[Vec<f64>], params: &CavParams) -> Result<Cav> {
        let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
        let (positive, negative) = match self.kind {
            CavKind::Concept => {
                let exclude: BTreeSet<usize> = self.members.iter().copied().collect();
                let counter = sample_counterpart(pool.len(), &exclude, self.size, self.seed)?;
                (pick(&self.members), pick(&counter))
            }
            CavKind::Random => {
                let both = sample_counterpart(pool.len(), &BTreeSet::new(), 2 * self.size, self.seed)?;
                (pick(&both[..self.size]), pick(&both[self.size..]))
            }
        };
        let mut cav = fit_cav(&positive, &negative, self.seed, params)?;
        cav.concept_id = self.concept_id;
        cav.kind = self.kind;
        Ok(cav)
    }
}

/// Runs every stage and writes all outputs under `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<RunLog> {
    let pipeline = Pipeline::new(config.clone(), out)?;
    pipeline.run_to(Stage::Report)?;
    Ok(pipeline.log())
}

/// Reads a results file written by the score stage.
pub fn read_results(path: &Path) -> Result<Vec<TcavResult>> {
    read_json(path)
}
