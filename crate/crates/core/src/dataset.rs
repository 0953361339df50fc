//! Slice-level records: manifest loading, intensity normalization, ROI crops
//! and dataset composition statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

/// The five ACDC diagnostic groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pathology {
    NOR,
    MINF,
    DCM,
    HCM,
    RV,
}

impl Pathology {
    pub const ALL: [Pathology; 5] = [
        Pathology::NOR,
        Pathology::RV,
        Pathology::MINF,
        Pathology::DCM,
        Pathology::HCM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pathology::NOR => "NOR",
            Pathology::MINF => "MINF",
            Pathology::DCM => "DCM",
            Pathology::HCM => "HCM",
            Pathology::RV => "RV",
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pathology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NOR" => Ok(Pathology::NOR),
            "MINF" => Ok(Pathology::MINF),
            "DCM" => Ok(Pathology::DCM),
            "HCM" => Ok(Pathology::HCM),
            "RV" => Ok(Pathology::RV),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

/// Canonical in-memory mask labels. Files may use any encoding declared in the
/// manifest; masks are remapped to these values on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "bg")]
    Background,
    RV,
    MYO,
    LV,
}

impl Structure {
    pub const FOREGROUND: [Structure; 3] = [Structure::LV, Structure::RV, Structure::MYO];

    pub const fn code(self) -> u8 {
        match self {
            Structure::Background => 0,
            Structure::RV => 1,
            Structure::MYO => 2,
            Structure::LV => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Structure> {
        match code {
            0 => Some(Structure::Background),
            1 => Some(Structure::RV),
            2 => Some(Structure::MYO),
            3 => Some(Structure::LV),
            _ => None,
        }
    }
}

/// Label values used in the mask files of one manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEncoding {
    pub bg: u8,
    #[serde(rename = "RV")]
    pub rv: u8,
    #[serde(rename = "MYO")]
    pub myo: u8,
    #[serde(rename = "LV")]
    pub lv: u8,
}

impl Default for LabelEncoding {
    fn default() -> Self {
        LabelEncoding {
            bg: 0,
            rv: 1,
            myo: 2,
            lv: 3,
        }
    }
}

impl LabelEncoding {
    fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<u8> = [self.bg, self.rv, self.myo, self.lv].into_iter().collect();
        if distinct.len() != 4 {
            return Err(Error::Manifest(
                "label_encoding must assign four distinct values".into(),
            ));
        }
        Ok(())
    }

    fn decode(&self, value: u8) -> Option<Structure> {
        if value == self.bg {
            Some(Structure::Background)
        } else if value == self.rv {
            Some(Structure::RV)
        } else if value == self.myo {
            Some(Structure::MYO)
        } else if value == self.lv {
            Some(Structure::LV)
        } else {
            None
        }
    }

    fn encode(&self, s: Structure) -> u8 {
        match s {
            Structure::Background => self.bg,
            Structure::RV => self.rv,
            Structure::MYO => self.myo,
            Structure::LV => self.lv,
        }
    }
}

/// One 2D short-axis slice with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: u32,
    pub phase: Phase,
    pub pathology: Pathology,
    pub split: Split,
    /// Intensities in [0, 1].
    pub image: Array2<f32>,
    /// Canonical structure codes (see [`Structure::code`]).
    pub mask: Array2<u8>,
    pub pixel_spacing: [f64; 2],
}

impl SliceRecord {
    /// Stable identifier `patient/phase/slice`.
    pub fn id(&self) -> String {
        slice_id(&self.patient_id, self.phase, self.slice_index)
    }

    pub fn source(&self) -> SliceRef {
        SliceRef {
            patient_id: self.patient_id.clone(),
            slice_index: self.slice_index,
            phase: self.phase,
            pathology: self.pathology,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dim()
    }

    /// Checks the record invariants: matching dimensions, [0,1] intensities
    /// and canonical mask codes.
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(Error::ShapeMismatch {
                id: self.id(),
                detail: format!(
                    "image is {:?} but mask is {:?}",
                    self.image.dim(),
                    self.mask.dim()
                ),
            });
        }
        if self
            .image
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(Error::IntensityRange(self.id()));
        }
        if let Some(bad) = self.mask.iter().find(|&&c| Structure::from_code(c).is_none()) {
            return Err(Error::UnknownLabel(format!("mask value {bad} in {}", self.id())));
        }
        Ok(())
    }
}

pub fn slice_id(patient_id: &str, phase: Phase, slice_index: u32) -> String {
    format!("{patient_id}/{phase:?}/{slice_index}")
}

/// Provenance of a patch or gradient example.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub patient_id: String,
    pub slice_index: u32,
    pub phase: Phase,
    pub pathology: Pathology,
}

impl SliceRef {
    pub fn id(&self) -> String {
        slice_id(&self.patient_id, self.phase, self.slice_index)
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub label_encoding: LabelEncoding,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub slice_index: u32,
    pub phase: Phase,
    /// Kept as text so an unknown group yields a dedicated error.
    pub pathology: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub pixel_spacing_mm: [f64; 2],
}

/// Min-max scales an image to [0, 1]. A constant image maps to all zeros.
pub fn normalize_intensity(image: &Array2<f32>) -> Array2<f32> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in image {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return image.mapv(|v| if v.is_finite() { 0.0 } else { v });
    }
    image.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Loads and validates every record listed in a manifest. Relative array paths
/// are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SliceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    manifest.label_encoding.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let record = load_record(base, entry, &manifest.label_encoding)?;
        if !seen.insert(record.id()) {
            return Err(Error::Manifest(format!("duplicate record `{}`", record.id())));
        }
        records.push(record);
    }
    Ok(records)
}

fn load_record(base: &Path, entry: &ManifestRecord, enc: &LabelEncoding) -> Result<SliceRecord> {
    let id = slice_id(&entry.patient_id, entry.phase, entry.slice_index);
    let pathology: Pathology = entry.pathology.parse()?;
    let raw_image: Array2<f32> = npy::read(&base.join(&entry.image_path))?;
    let raw_mask: Array2<u8> = npy::read(&base.join(&entry.mask_path))?;
    if raw_image.dim() != raw_mask.dim() {
        return Err(Error::ShapeMismatch {
            id,
            detail: format!(
                "image is {:?} but mask is {:?}",
                raw_image.dim(),
                raw_mask.dim()
            ),
        });
    }
    let mut mask = Array2::<u8>::zeros(raw_mask.dim());
    for (dst, &v) in mask.iter_mut().zip(raw_mask.iter()) {
        *dst = enc
            .decode(v)
            .ok_or_else(|| Error::UnknownLabel(format!("mask value {v} in {id}")))?
            .code();
    }
    let record = SliceRecord {
        patient_id: entry.patient_id.clone(),
        slice_index: entry.slice_index,
        phase: entry.phase,
        pathology,
        split: entry.split,
        image: normalize_intensity(&raw_image),
        mask,
        pixel_spacing: entry.pixel_spacing_mm,
    };
    record.validate()?;
    Ok(record)
}

/// Writes records as NPY arrays under `dir/arrays/` plus `dir/manifest.json`.
/// Returns the manifest path.
pub fn write_manifest(dir: &Path, records: &[SliceRecord], enc: LabelEncoding) -> Result<PathBuf> {
    enc.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let stem = format!("{}_{:?}_{:03}", r.patient_id, r.phase, r.slice_index);
        let image_path = PathBuf::from("arrays").join(format!("{stem}_image.npy"));
        let mask_path = PathBuf::from("arrays").join(format!("{stem}_mask.npy"));
        npy::write(&dir.join(&image_path), &r.image)?;
        let encoded = r.mask.mapv(|c| {
            enc.encode(Structure::from_code(c).unwrap_or(Structure::Background))
        });
        npy::write(&dir.join(&mask_path), &encoded)?;
        entries.push(ManifestRecord {
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
            phase: r.phase,
            pathology: r.pathology.as_str().to_string(),
            split: r.split,
            image_path,
            mask_path,
            pixel_spacing_mm: r.pixel_spacing,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        label_encoding: enc,
        records: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// ROI cropping

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl RoiBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn union(&self, other: &RoiBox) -> RoiBox {
        RoiBox {
            row_min: self.row_min.min(other.row_min),
            row_max: self.row_max.max(other.row_max),
            col_min: self.col_min.min(other.col_min),
            col_max: self.col_max.max(other.col_max),
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row_min <= self.row_max
            && self.col_min <= self.col_max
            && self.row_max < height
            && self.col_max < width
    }

    fn clip(&self, height: usize, width: usize) -> RoiBox {
        RoiBox {
            row_min: self.row_min.min(height - 1),
            row_max: self.row_max.min(height - 1),
            col_min: self.col_min.min(width - 1),
            col_max: self.col_max.min(width - 1),
        }
    }
}

/// Tight bounding box of the non-background mask pixels.
pub fn mask_bbox(mask: &Array2<u8>) -> Option<RoiBox> {
    let mut bbox: Option<RoiBox> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v == Structure::Background.code() {
            continue;
        }
        let b = bbox.get_or_insert(RoiBox {
            row_min: r,
            row_max: r,
            col_min: c,
            col_max: c,
        });
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    bbox
}

/// Pads a tight box by `ceil(margin_frac * max side)` on every side, grows the
/// shorter axis to make it square, then clips to the image.
pub fn padded_square_box(bbox: RoiBox, margin_frac: f64, height: usize, width: usize) -> RoiBox {
    let side = bbox.height().max(bbox.width()) as i64;
    // The small offset keeps products such as 0.1 * 30 from rounding up to 4.
    let pad = ((margin_frac * side as f64) - 1e-9).ceil().max(0.0) as i64;
    let mut r0 = bbox.row_min as i64 - pad;
    let mut r1 = bbox.row_max as i64 + pad;
    let mut c0 = bbox.col_min as i64 - pad;
    let mut c1 = bbox.col_max as i64 + pad;
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    if h < w {
        let extra = w - h;
        r0 -= extra / 2;
        r1 += extra - extra / 2;
    } else if w < h {
        let extra = h - w;
        c0 -= extra / 2;
        c1 += extra - extra / 2;
    }
    RoiBox {
        row_min: r0.max(0) as usize,
        row_max: r1.min(height as i64 - 1) as usize,
        col_min: c0.max(0) as usize,
        col_max: c1.min(width as i64 - 1) as usize,
    }
}

/// Crops image and mask to the ROI derived from the ground-truth mask. Slices
/// with an empty mask use `fallback` (normally the patient-level union box).
pub fn roi_crop(
    record: &SliceRecord,
    margin_frac: f64,
    fallback: Option<RoiBox>,
) -> Result<(SliceRecord, RoiBox)> {
    if !(0.0..=1.0).contains(&margin_frac) {
        return Err(Error::InvalidParam(format!(
            "margin_frac must lie in [0,1], got {margin_frac}"
        )));
    }
    let (h, w) = record.dims();
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            id: record.id(),
            detail: "empty image".into(),
        });
    }
    let roi = match mask_bbox(&record.mask) {
        Some(bbox) => padded_square_box(bbox, margin_frac, h, w),
        None => {
            let fb = fallback.ok_or_else(|| Error::EmptyMask(record.id()))?;
            if fb.row_min > fb.row_max || fb.col_min > fb.col_max {
                return Err(Error::InvalidParam(format!("malformed fallback box {fb:?}")));
            }
            fb.clip(h, w)
        }
    };
    Ok((crop_to(record, roi), roi))
}

pub fn crop_to(record: &SliceRecord, roi: RoiBox) -> SliceRecord {
    let rows = roi.row_min..roi.row_max + 1;
    let cols = roi.col_min..roi.col_max + 1;
    SliceRecord {
        image: record.image.slice(s![rows.clone(), cols.clone()]).to_owned(),
        mask: record.mask.slice(s![rows, cols]).to_owned(),
        ..record.clone()
    }
}

/// Per-patient union of the crop boxes of all non-empty slices.
pub fn patient_fallback_boxes(
    records: &[SliceRecord],
    margin_frac: f64,
) -> BTreeMap<String, RoiBox> {
    let mut out: BTreeMap<String, RoiBox> = BTreeMap::new();
    for r in records {
        let (h, w) = r.dims();
        if let Some(bbox) = mask_bbox(&r.mask) {
            let roi = padded_square_box(bbox, margin_frac, h, w);
            out.entry(r.patient_id.clone())
                .and_modify(|b| *b = b.union(&roi))
                .or_insert(roi);
        }
    }
    out
}

/// Crops every record, resolving empty masks through the patient fallback.
pub fn crop_all(records: &[SliceRecord], margin_frac: f64) -> Result<Vec<(SliceRecord, RoiBox)>> {
    let fallbacks = patient_fallback_boxes(records, margin_frac);
    crate::par::try_map(records, |r| {
        roi_crop(r, margin_frac, fallbacks.get(&r.patient_id).copied())
    })
}

// ---------------------------------------------------------------------------
// Composition statistics

/// Share of non-background pixels over the uncropped images.
pub fn heart_pixel_ratio(records: &[SliceRecord], phase: Option<Phase>) -> Result<f64> {
    let mut fg = 0u64;
    let mut total = 0u64;
    for r in records.iter().filter(|r| phase.is_none_or(|p| r.phase == p)) {
        fg += r
            .mask
            .iter()
            .filter(|&&v| v != Structure::Background.code())
            .count() as u64;
        total += r.mask.len() as u64;
    }
    if total == 0 {
        return Err(Error::Empty("no slices match the phase filter".into()));
    }
    Ok(fg as f64 / total as f64)
}

/// Which cardiac structures a slice shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PresenceSubgroup {
    None,
    All,
    Myo,
    Rv,
    RvMyo,
    LvMyo,
}

impl PresenceSubgroup {
    pub const VALUES: [PresenceSubgroup; 6] = [
        PresenceSubgroup::None,
        PresenceSubgroup::All,
        PresenceSubgroup::Myo,
        PresenceSubgroup::Rv,
        PresenceSubgroup::RvMyo,
        PresenceSubgroup::LvMyo,
    ];

    /// Classifies a mask by the set of labels present. An LV cavity without
    /// myocardium is treated as if the wall were present: `{LV}` maps to
    /// `LvMyo` and `{LV, RV}` to `All`.
    pub fn of_mask(mask: &Array2<u8>) -> PresenceSubgroup {
        let (mut lv, mut rv, mut myo) = (false, false, false);
        for &v in mask {
            match Structure::from_code(v) {
                Some(Structure::LV) => lv = true,
                Some(Structure::RV) => rv = true,
                Some(Structure::MYO) => myo = true,
                _ => {}
            }
        }
        match (lv, rv, myo) {
            (false, false, false) => PresenceSubgroup::None,
            (true, true, _) => PresenceSubgroup::All,
            (true, false, _) => PresenceSubgroup::LvMyo,
            (false, true, true) => PresenceSubgroup::RvMyo,
            (false, true, false) => PresenceSubgroup::Rv,
            (false, false, true) => PresenceSubgroup::Myo,
        }
    }
}

pub fn presence_distribution(records: &[SliceRecord]) -> Result<BTreeMap<PresenceSubgroup, f64>> {
    if records.is_empty() {
        return Err(Error::Empty("presence distribution of zero slices".into()));
    }
    let mut counts: BTreeMap<PresenceSubgroup, usize> =
        PresenceSubgroup::VALUES.iter().map(|&g| (g, 0)).collect();
    for r in records {
        *counts.entry(PresenceSubgroup::of_mask(&r.mask)).or_default() += 1;
    }
    let n = records.len() as f64;
    Ok(counts.into_iter().map(|(g, c)| (g, c as f64 / n)).collect())
}
