//! Study/volume/slice data model: manifest parsing and validation,
//! subject-wise splitting, and slice-level label derivation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which breast a volume images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Laterality::L => write!(f, "L"),
            Laterality::R => write!(f, "R"),
        }
    }
}

impl std::str::FromStr for Laterality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L" => Ok(Laterality::L),
            "R" => Ok(Laterality::R),
            other => Err(format!("invalid laterality {other:?} (expected L or R)")),
        }
    }
}

/// Acquisition view angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            View::CC => write!(f, "CC"),
            View::MLO => write!(f, "MLO"),
        }
    }
}

impl std::str::FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "CC" => Ok(View::CC),
            "MLO" => Ok(View::MLO),
            other => Err(format!("invalid view {other:?} (expected CC or MLO)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Normal,
    Abnormal,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Normal => write!(f, "normal"),
            ClassLabel::Abnormal => write!(f, "abnormal"),
        }
    }
}

/// Axis-aligned box in pixel coordinates of the slice the manifest points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Single-slice bounding-box annotation of an abnormal volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub slice_index: usize,
    pub bbox: BBox,
}

/// One volume: an ordered stack of grayscale slices on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub patient_id: String,
    pub study_id: String,
    pub laterality: Laterality,
    pub view: View,
    /// Path of the volume directory, relative to the manifest root.
    pub path: PathBuf,
    pub n_slices: usize,
    pub class_label: ClassLabel,
    pub annotation: Option<Annotation>,
}

impl VolumeRecord {
    /// Stable identifier used in score tables and logs.
    pub fn volume_id(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.patient_id, self.study_id, self.laterality, self.view
        )
    }
}

/// Index of patients -> studies -> volumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyManifest {
    pub entries: Vec<VolumeRecord>,
    /// Directory that `VolumeRecord::path` entries are relative to.
    pub root_path: PathBuf,
}

/// Handle to one addressable slice of one volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SliceRef {
    /// Index into `StudyManifest::entries`.
    pub volume: usize,
    pub slice_index: usize,
}

impl SliceRef {
    pub fn new(manifest: &StudyManifest, volume: usize, slice_index: usize) -> Result<Self> {
        let record = manifest
            .entries
            .get(volume)
            .ok_or_else(|| Error::InvalidInput(format!("volume index {volume} out of range")))?;
        if slice_index >= record.n_slices {
            return Err(Error::SliceIndexOutOfRange {
                index: slice_index,
                n_slices: record.n_slices,
            });
        }
        Ok(SliceRef {
            volume,
            slice_index,
        })
    }
}

/// Ratios and seed for the subject-wise split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            ratios: (train, val, test),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::Split(format!(
                "split ratios must all be positive, got ({a}, {b}, {c})"
            )));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!(
                "split ratios must sum to 1, got ({a}, {b}, {c})"
            )));
        }
        Ok(())
    }
}

pub const MANIFEST_HEADER: [&str; 12] = [
    "patient_id",
    "study_id",
    "laterality",
    "view",
    "path",
    "n_slices",
    "class_label",
    "annot_slice",
    "annot_x",
    "annot_y",
    "annot_w",
    "annot_h",
];

fn schema_err(path: &Path, row: u64, message: impl Into<String>) -> Error {
    Error::ManifestSchema {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Loads and fully validates a manifest CSV.
///
/// Validation covers the header, per-row field syntax, the
/// abnormal-iff-annotated invariant, uniqueness of
/// (patient, study, laterality, view), existence of every referenced volume
/// directory, and containment of each annotation bbox inside its annotated
/// slice (the annotated slice file is opened for its dimensions).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<StudyManifest> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ManifestInvalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::ManifestInvalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::ManifestInvalid {
            path: path.to_path_buf(),
            message: format!("bad header: expected {expected:?}, got {got:?}"),
        });
    }

    let root_path = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::ManifestInvalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let row = rec
            .position()
            .map(|p| p.line())
            .unwrap_or(entries.len() as u64 + 2);

        let field = |i: usize| rec.get(i).unwrap_or("");
        let patient_id = field(0).to_string();
        let study_id = field(1).to_string();
        if patient_id.is_empty() || study_id.is_empty() {
            return Err(schema_err(path, row, "empty patient_id or study_id"));
        }
        let laterality: Laterality = field(2)
            .parse()
            .map_err(|e: String| schema_err(path, row, e))?;
        let view: View = field(3)
            .parse()
            .map_err(|e: String| schema_err(path, row, e))?;
        let rel_path = PathBuf::from(field(4));
        if rel_path.as_os_str().is_empty() {
            return Err(schema_err(path, row, "empty path"));
        }
        let n_slices: usize = field(5)
            .parse()
            .map_err(|e| schema_err(path, row, format!("bad n_slices: {e}")))?;
        if n_slices == 0 {
            return Err(schema_err(path, row, "n_slices must be >= 1"));
        }
        let class_label = match field(6) {
            "normal" => ClassLabel::Normal,
            "abnormal" => ClassLabel::Abnormal,
            other => {
                return Err(schema_err(
                    path,
                    row,
                    format!("invalid class_label {other:?}"),
                ))
            }
        };

        let annot_fields: Vec<&str> = (7..12).map(field).collect();
        let all_empty = annot_fields.iter().all(|s| s.is_empty());
        let annotation = if all_empty {
            None
        } else {
            if annot_fields.iter().any(|s| s.is_empty()) {
                return Err(schema_err(
                    path,
                    row,
                    "annotation columns must be all set or all empty",
                ));
            }
            let nums: Vec<i64> = annot_fields
                .iter()
                .map(|s| {
                    s.parse::<i64>()
                        .map_err(|e| schema_err(path, row, format!("bad annotation field: {e}")))
                })
                .collect::<Result<_>>()?;
            if nums.iter().any(|&v| v < 0) {
                return Err(schema_err(path, row, "negative annotation field"));
            }
            let slice_index = nums[0] as usize;
            if slice_index >= n_slices {
                return Err(schema_err(
                    path,
                    row,
                    format!("annot_slice {slice_index} out of range (n_slices {n_slices})"),
                ));
            }
            let bbox = BBox {
                x: nums[1] as u32,
                y: nums[2] as u32,
                w: nums[3] as u32,
                h: nums[4] as u32,
            };
            if bbox.w == 0 || bbox.h == 0 {
                return Err(schema_err(path, row, "annotation bbox must have w, h > 0"));
            }
            Some(Annotation { slice_index, bbox })
        };

        match (class_label, annotation.is_some()) {
            (ClassLabel::Abnormal, false) => {
                return Err(schema_err(path, row, "abnormal record without annotation"))
            }
            (ClassLabel::Normal, true) => {
                return Err(schema_err(path, row, "normal record with annotation"))
            }
            _ => {}
        }

        let key = (patient_id.clone(), study_id.clone(), laterality, view);
        if !seen.insert(key) {
            return Err(schema_err(
                path,
                row,
                format!(
                    "duplicate (patient_id, study_id, laterality, view) = ({patient_id}, {study_id}, {laterality}, {view})"
                ),
            ));
        }

        let volume_dir = root_path.join(&rel_path);
        if !volume_dir.is_dir() {
            return Err(schema_err(
                path,
                row,
                format!("volume directory {} does not exist", volume_dir.display()),
            ));
        }

        if let Some(annot) = &annotation {
            let slice_file = volume_dir.join(crate::volume::slice_file_name(annot.slice_index));
            let (w, h) = image::image_dimensions(&slice_file).map_err(|e| Error::Image {
                path: slice_file.clone(),
                source: e,
            })?;
            let bb = annot.bbox;
            if u64::from(bb.x) + u64::from(bb.w) > u64::from(w)
                || u64::from(bb.y) + u64::from(bb.h) > u64::from(h)
            {
                return Err(schema_err(
                    path,
                    row,
                    format!(
                        "bbox ({}, {}, {}, {}) exceeds slice bounds {}x{}",
                        bb.x, bb.y, bb.w, bb.h, w, h
                    ),
                ));
            }
        }

        entries.push(VolumeRecord {
            patient_id,
            study_id,
            laterality,
            view,
            path: rel_path,
            n_slices,
            class_label,
            annotation,
        });
    }

    Ok(StudyManifest { entries, root_path })
}

/// Writes a manifest CSV. Volume paths are re-relativized against the output
/// file's directory so the written manifest loads from its new location.
pub fn write_manifest(manifest: &StudyManifest, out_csv: impl AsRef<Path>) -> Result<()> {
    let out_csv = out_csv.as_ref();
    let out_dir = out_csv
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut writer = csv::Writer::from_path(out_csv).map_err(|e| Error::ManifestInvalid {
        path: out_csv.to_path_buf(),
        message: e.to_string(),
    })?;
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| Error::ManifestInvalid {
            path: out_csv.to_path_buf(),
            message: e.to_string(),
        })?;
    for rec in &manifest.entries {
        let abs = manifest.root_path.join(&rec.path);
        let rel = relativize(&abs, &out_dir).unwrap_or(abs.clone());
        let (a_s, a_x, a_y, a_w, a_h) = match &rec.annotation {
            Some(a) => (
                a.slice_index.to_string(),
                a.bbox.x.to_string(),
                a.bbox.y.to_string(),
                a.bbox.w.to_string(),
                a.bbox.h.to_string(),
            ),
            None => Default::default(),
        };
        writer
            .write_record([
                rec.patient_id.as_str(),
                rec.study_id.as_str(),
                &rec.laterality.to_string(),
                &rec.view.to_string(),
                &rel.to_string_lossy(),
                &rec.n_slices.to_string(),
                &rec.class_label.to_string(),
                &a_s,
                &a_x,
                &a_y,
                &a_w,
                &a_h,
            ])
            .map_err(|e| Error::ManifestInvalid {
                path: out_csv.to_path_buf(),
                message: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| Error::io(out_csv, e))?;
    Ok(())
}

/// Expresses `target` relative to `base` using lexical path components.
/// Falls back to `None` when the two share no usable prefix relationship
/// (e.g. different absolute roots with `..` needed beyond the base).
fn relativize(target: &Path, base: &Path) -> Option<PathBuf> {
    let target = normalize_lexically(target);
    let base = normalize_lexically(base);
    if target.is_absolute() != base.is_absolute() {
        return None;
    }
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(b.iter()).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    Some(out)
}

fn normalize_lexically(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Splits a manifest subject-wise: all volumes of one patient land in exactly
/// one of (train, val, test). Patients are shuffled by the seed and cut at
/// cumulative-ratio boundaries computed with floor; the remainder goes to
/// train.
pub fn split_subjectwise(
    manifest: &StudyManifest,
    spec: &SplitSpec,
) -> Result<(StudyManifest, StudyManifest, StudyManifest)> {
    spec.validate()?;
    // BTreeMap gives a stable patient ordering before the shuffle.
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in manifest.entries.iter().enumerate() {
        by_patient.entry(&rec.patient_id).or_default().push(i);
    }
    let n = by_patient.len();
    if n < 3 {
        return Err(Error::Split(format!(
            "need at least 3 distinct patients to split, got {n}"
        )));
    }

    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    patients.shuffle(&mut rng);

    let (r_train, r_val, r_test) = spec.ratios;
    let n_train_floor = (r_train * n as f64).floor() as usize;
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test; // floor remainder goes to train
    debug_assert!(n_train >= n_train_floor);

    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        assignment.insert(p, split);
    }

    let mut parts: [Vec<VolumeRecord>; 3] = Default::default();
    for rec in &manifest.entries {
        let split = assignment[rec.patient_id.as_str()];
        parts[split].push(rec.clone());
    }
    let [train, val, test] = parts;
    let mk = |entries: Vec<VolumeRecord>| StudyManifest {
        entries,
        root_path: manifest.root_path.clone(),
    };
    Ok((mk(train), mk(val), mk(test)))
}

/// Derives the label of one slice: abnormal iff the volume is annotated and
/// the slice lies within `window` slices of the annotated index.
pub fn slice_label(volume: &VolumeRecord, slice_index: usize, window: usize) -> Result<ClassLabel> {
    if slice_index >= volume.n_slices {
        return Err(Error::SliceIndexOutOfRange {
            index: slice_index,
            n_slices: volume.n_slices,
        });
    }
    Ok(match &volume.annotation {
        Some(annot) => {
            let dist = slice_index.abs_diff(annot.slice_index);
            if dist <= window {
                ClassLabel::Abnormal
            } else {
                ClassLabel::Normal
            }
        }
        None => ClassLabel::Normal,
    })
}

/// Per-split roll-up used by the `split` command's JSON summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSummary {
    pub patients: usize,
    pub volumes: usize,
    pub abnormal_volumes: usize,
}

pub fn summarize(manifest: &StudyManifest) -> SplitSummary {
    let patients = manifest
        .entries
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<std::collections::HashSet<_>>()
        .len();
    let abnormal_volumes = manifest
        .entries
        .iter()
        .filter(|r| r.class_label == ClassLabel::Abnormal)
        .count();
    SplitSummary {
        patients,
        volumes: manifest.entries.len(),
        abnormal_volumes,
    }
}
