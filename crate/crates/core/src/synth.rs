//! Procedural pseudo-tomosynthesis generator: rare bright ellipsoidal lesions
//! planted in smooth noise "tissue", with per-patient derived seeds so
//! parallel and serial generation are bit-identical.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BBox, ClassLabel, Laterality, StudyManifest, View, VolumeRecord};
use crate::derived_rng;
use crate::error::{Error, Result};
use crate::volume::{save_volume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Fraction of patients given one abnormal breast side.
    pub abnormal_fraction: f64,
    pub slices_per_volume: usize,
    pub slice_height: usize,
    pub slice_width: usize,
    /// Peak intensity added by a lesion, in [0, 1] intensity units.
    pub lesion_intensity_boost: f64,
    pub lesion_radius_min: usize,
    pub lesion_radius_max: usize,
    /// Number of consecutive slices a lesion occupies.
    pub lesion_z_extent: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 20,
            abnormal_fraction: 0.1,
            slices_per_volume: 24,
            slice_height: 128,
            slice_width: 128,
            lesion_intensity_boost: 0.3,
            lesion_radius_min: 9,
            lesion_radius_max: 16,
            lesion_z_extent: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_abnormal_patients(&self) -> usize {
        (self.abnormal_fraction * self.n_patients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config("abnormal_fraction must be in [0, 1)".into()));
        }
        if self.abnormal_fraction > 0.0 && self.abnormal_fraction * (self.n_patients as f64) < 1.0 {
            return Err(Error::Config(
                "abnormal_fraction * n_patients must be >= 1 when abnormal cases are requested"
                    .into(),
            ));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::Config("slices_per_volume must be >= 1".into()));
        }
        if self.lesion_intensity_boost <= 0.0 {
            return Err(Error::Config("lesion_intensity_boost must be > 0".into()));
        }
        if self.lesion_radius_min == 0 || self.lesion_radius_min > self.lesion_radius_max {
            return Err(Error::Config("bad lesion radius range".into()));
        }
        if self.lesion_z_extent == 0 || self.lesion_z_extent > self.slices_per_volume {
            return Err(Error::Config(
                "lesion_z_extent must be in [1, slices_per_volume]".into(),
            ));
        }
        // Worst-case lesion footprint (max anisotropy 1.25) plus a 2 px
        // margin must fit inside the slice.
        let max_r = (self.lesion_radius_max as f64 * 1.25).ceil() as usize;
        if 2 * max_r + 4 > self.slice_height.min(self.slice_width) {
            return Err(Error::Config(
                "infeasible lesion geometry: lesion does not fit inside slice".into(),
            ));
        }
        Ok(())
    }
}

/// Bilinearly interpolated random-value grid; one octave of value noise.
struct NoiseOctave {
    grid: Array2<f32>,
    cell: f32,
}

impl NoiseOctave {
    fn sample(&self, y: f32, x: f32) -> f32 {
        let (gh, gw) = self.grid.dim();
        let fy = (y / self.cell).min((gh - 1) as f32 - 1e-3);
        let fx = (x / self.cell).min((gw - 1) as f32 - 1e-3);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let dy = fy - y0 as f32;
        let dx = fx - x0 as f32;
        let g = &self.grid;
        let top = g[[y0, x0]] * (1.0 - dx) + g[[y0, x0 + 1]] * dx;
        let bot = g[[y0 + 1, x0]] * (1.0 - dx) + g[[y0 + 1, x0 + 1]] * dx;
        top * (1.0 - dy) + bot * dy
    }
}

fn draw_octave(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> NoiseOctave {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random::<f32>());
    NoiseOctave {
        grid,
        cell: cell as f32,
    }
}

struct TissueField {
    octaves: Vec<(NoiseOctave, f32)>,
}

impl TissueField {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let base = (h.min(w) / 4).max(2);
        let octaves = vec![
            (draw_octave(rng, h, w, base), 0.5),
            (draw_octave(rng, h, w, (base / 2).max(2)), 0.3),
            (draw_octave(rng, h, w, (base / 4).max(2)), 0.2),
        ];
        TissueField { octaves }
    }

    fn sample(&self, y: f32, x: f32) -> f32 {
        self.octaves
            .iter()
            .map(|(o, amp)| o.sample(y, x) * amp)
            .sum()
    }
}

struct LesionSpec {
    /// Fraction of the tissue extent from the anchored edge, and vertical
    /// offset fraction; shared by both views of the side.
    rel_x: f64,
    rel_y: f64,
    radius_x: f64,
    radius_y: f64,
    center_slice: usize,
    span_lo: usize,
    span_hi: usize,
}

struct SideGround {
    field: TissueField,
    center_y: f64,
    semi_x: f64,
    semi_y: f64,
    lesion: Option<LesionSpec>,
}

fn z_weight(z: usize, spec: &LesionSpec) -> f64 {
    if z < spec.span_lo || z > spec.span_hi {
        return 0.0;
    }
    let a = spec.center_slice - spec.span_lo;
    let b = spec.span_hi - spec.center_slice;
    let half = a.max(b) as f64;
    let d = (z as f64 - spec.center_slice as f64).abs();
    // Plateau profile: edge slices keep at least ~2/3 of the peak so every
    // slice the labeling window marks abnormal shows a clear lesion.
    1.0 - 0.5 * d / (half + 1.0)
}

struct RenderedVolume {
    volume: Volume,
    annotation: Option<Annotation>,
}

fn render_volume(
    cfg: &SynthConfig,
    side: &SideGround,
    laterality: Laterality,
    view: View,
    rng: &mut ChaCha8Rng,
) -> RenderedVolume {
    let (h, w, n) = (cfg.slice_height, cfg.slice_width, cfg.slices_per_volume);
    // View-specific modulation keeps the two views of a side similar but not
    // identical: CC uses the shared field directly, MLO stretches it.
    let (stretch_y, shift_y) = match view {
        View::CC => (1.0f64, 0.0f64),
        View::MLO => (1.12, 0.04 * h as f64),
    };
    let secondary = draw_octave(rng, h, w, (h.min(w) / 6).max(2));
    let grain_amp = 0.015f32;

    let semi_y = side.semi_y * stretch_y;
    let center_y = side.center_y + shift_y;
    let anchor_left = laterality == Laterality::L;

    // Lesion center in this view's absolute coordinates.
    let lesion_abs = side.lesion.as_ref().map(|l| {
        let lx = l.rel_x * side.semi_x;
        let cx = if anchor_left { lx } else { (w - 1) as f64 - lx };
        let cy = center_y + l.rel_y * semi_y;
        let cx = cx.clamp(l.radius_x + 1.0, (w - 2) as f64 - l.radius_x);
        let cy = cy.clamp(l.radius_y + 1.0, (h - 2) as f64 - l.radius_y);
        (cx, cy)
    });

    let mut data = Array3::<u16>::zeros((n, h, w));
    for z in 0..n {
        let depth = if n > 1 {
            0.9 + 0.2 * (std::f64::consts::PI * z as f64 / (n - 1) as f64).sin()
        } else {
            1.0
        };
        let zw = side.lesion.as_ref().map_or(0.0, |l| z_weight(z, l));
        for y in 0..h {
            for x in 0..w {
                let grain = (rng.random::<f32>() - 0.5) * 2.0 * grain_amp;
                let ex = if anchor_left {
                    x as f64 / side.semi_x
                } else {
                    ((w - 1 - x) as f64) / side.semi_x
                };
                let ey = (y as f64 - center_y) / semi_y;
                let inside = ex * ex + ey * ey <= 1.0;
                let mut v = if inside {
                    let noise = side.field.sample(y as f32, x as f32);
                    (0.30 + 0.30 * f64::from(noise)) * depth
                        + 0.06 * f64::from(secondary.sample(y as f32, x as f32))
                } else {
                    0.02
                };
                if zw > 0.0 {
                    if let (Some(l), Some((cx, cy))) = (&side.lesion, lesion_abs) {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let e = (dx / l.radius_x).powi(2) + (dy / l.radius_y).powi(2);
                        if e <= 1.0 {
                            let bump = (-0.5 * e).exp();
                            v += cfg.lesion_intensity_boost * zw * bump;
                        }
                    }
                }
                let v = (v + f64::from(grain)).clamp(0.0, 1.0);
                data[[z, y, x]] = (v * 65535.0).round() as u16;
            }
        }
    }

    let annotation = side.lesion.as_ref().map(|l| {
        let (cx, cy) = lesion_abs.unwrap();
        let x0 = (cx - l.radius_x).floor().max(0.0) as u32;
        let y0 = (cy - l.radius_y).floor().max(0.0) as u32;
        let x1 = (cx + l.radius_x).ceil().min((w - 1) as f64) as u32;
        let y1 = (cy + l.radius_y).ceil().min((h - 1) as f64) as u32;
        Annotation {
            slice_index: l.center_slice,
            bbox: BBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            },
        }
    });

    RenderedVolume {
        volume: Volume { data },
        annotation,
    }
}

fn draw_side(cfg: &SynthConfig, rng: &mut ChaCha8Rng, abnormal: bool) -> SideGround {
    let (h, w) = (cfg.slice_height as f64, cfg.slice_width as f64);
    let field = TissueField::draw(rng, cfg.slice_height, cfg.slice_width);
    let center_y = h * (0.5 + 0.08 * (rng.random::<f64>() - 0.5));
    let semi_y = h * (0.42 + 0.06 * rng.random::<f64>());
    let semi_x = w * (0.65 + 0.15 * rng.random::<f64>());
    let lesion = if abnormal {
        let rel_x = 0.2 + 0.4 * rng.random::<f64>();
        let rel_y = -0.45 + 0.9 * rng.random::<f64>();
        let r = cfg.lesion_radius_min as f64
            + (cfg.lesion_radius_max - cfg.lesion_radius_min) as f64 * rng.random::<f64>();
        let aniso = 0.8 + 0.45 * rng.random::<f64>();
        let e = cfg.lesion_z_extent;
        let a = (e - 1) / 2;
        let b = e - 1 - a;
        let lo = a;
        let hi = cfg.slices_per_volume - 1 - b;
        let center_slice = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Some(LesionSpec {
            rel_x,
            rel_y,
            radius_x: r * aniso,
            radius_y: r / aniso,
            center_slice,
            span_lo: center_slice - a,
            span_hi: center_slice + b,
        })
    } else {
        None
    };
    SideGround {
        field,
        center_y,
        semi_x,
        semi_y,
        lesion,
    }
}

struct PatientOutput {
    records: Vec<VolumeRecord>,
}

fn generate_patient(
    cfg: &SynthConfig,
    out_dir: &Path,
    patient_index: usize,
    abnormal: bool,
) -> Result<PatientOutput> {
    let mut rng = derived_rng(cfg.seed, &[1, patient_index as u64]);
    let patient_id = format!("P{patient_index:04}");
    let study_id = "S0".to_string();
    let abnormal_side = if abnormal {
        if rng.random::<f64>() < 0.5 {
            Some(Laterality::L)
        } else {
            Some(Laterality::R)
        }
    } else {
        None
    };

    let mut records = Vec::with_capacity(4);
    for laterality in [Laterality::L, Laterality::R] {
        let side_abnormal = abnormal_side == Some(laterality);
        let side = draw_side(cfg, &mut rng, side_abnormal);
        for view in [View::CC, View::MLO] {
            let rendered = render_volume(cfg, &side, laterality, view, &mut rng);
            let dir_name = format!("{patient_id}_{study_id}_{laterality}_{view}");
            save_volume(out_dir.join(&dir_name), &rendered.volume)?;
            records.push(VolumeRecord {
                patient_id: patient_id.clone(),
                study_id: study_id.clone(),
                laterality,
                view,
                path: PathBuf::from(dir_name),
                n_slices: cfg.slices_per_volume,
                class_label: if side_abnormal {
                    ClassLabel::Abnormal
                } else {
                    ClassLabel::Normal
                },
                annotation: rendered.annotation,
            });
        }
    }
    Ok(PatientOutput { records })
}

/// Generates the dataset under `out_dir` and writes `manifest.csv` plus a
/// `provenance.json` echo of the config. Returns the loaded-back manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<StudyManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Abnormal patient assignment comes from a dedicated stream so patient
    // rendering seeds stay independent of it.
    let mut pick_rng = derived_rng(cfg.seed, &[0]);
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut pick_rng);
    let n_abn = cfg.n_abnormal_patients();
    let abnormal: std::collections::HashSet<usize> = order.into_iter().take(n_abn).collect();

    let outputs: Vec<Result<PatientOutput>> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|p| generate_patient(cfg, out_dir, p, abnormal.contains(&p)))
        .collect();

    let mut entries = Vec::with_capacity(cfg.n_patients * 4);
    for out in outputs {
        entries.extend(out?.records);
    }
    let manifest = StudyManifest {
        entries,
        root_path: out_dir.to_path_buf(),
    };
    crate::dataset::write_manifest(&manifest, out_dir.join("manifest.csv"))?;

    let provenance = serde_json::json!({ "generator_config": cfg });
    std::fs::write(
        out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance).unwrap(),
    )
    .map_err(|e| Error::io(out_dir.join("provenance.json"), e))?;

    crate::dataset::load_manifest(out_dir.join("manifest.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::slice_label;
    use sha2::{Digest, Sha256};

    fn tiny_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 4,
            abnormal_fraction: 0.25,
            slices_per_volume: 8,
            slice_height: 48,
            slice_width: 48,
            lesion_intensity_boost: 0.3,
            lesion_radius_min: 5,
            lesion_radius_max: 8,
            lesion_z_extent: 5,
            seed,
        }
    }

    fn dir_digest(dir: &Path) -> Vec<u8> {
        let mut files: Vec<PathBuf> = walk(dir);
        files.sort();
        let mut hasher = Sha256::new();
        for f in files {
            hasher.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
            hasher.update(std::fs::read(&f).unwrap());
        }
        hasher.finalize().to_vec()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn abnormality_is_per_side_and_counts_match() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_patients: 20,
            abnormal_fraction: 0.1,
            slices_per_volume: 4,
            slice_height: 48,
            slice_width: 48,
            lesion_radius_min: 5,
            lesion_radius_max: 8,
            lesion_z_extent: 3,
            ..SynthConfig::default()
        };
        let m = generate_dataset(&cfg, tmp.path()).unwrap();
        assert_eq!(m.entries.len(), 80);
        let abnormal: Vec<_> = m
            .entries
            .iter()
            .filter(|r| r.class_label == ClassLabel::Abnormal)
            .collect();
        // 2 abnormal patients, each with one abnormal side = 2 volumes.
        assert_eq!(abnormal.len(), 4);
        let patients: std::collections::HashSet<_> =
            abnormal.iter().map(|r| r.patient_id.clone()).collect();
        assert_eq!(patients.len(), 2);
        for p in &patients {
            let sides: std::collections::HashSet<_> = abnormal
                .iter()
                .filter(|r| &r.patient_id == p)
                .map(|r| r.laterality)
                .collect();
            assert_eq!(sides.len(), 1, "lesion must stay on one side");
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let cfg = tiny_config(7);
        generate_dataset(&cfg, t1.path()).unwrap();
        generate_dataset(&cfg, t2.path()).unwrap();
        assert_eq!(dir_digest(t1.path()), dir_digest(t2.path()));
    }

    #[test]
    fn parallel_and_serial_generation_agree() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let cfg = tiny_config(3);
        generate_dataset(&cfg, t1.path()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| generate_dataset(&cfg, t2.path())).unwrap();
        assert_eq!(dir_digest(t1.path()), dir_digest(t2.path()));
    }

    /// Generates the same seed twice with different boosts; nonzero diffs
    /// localize the lesion exactly.
    fn lesion_diff_slices(cfg: &SynthConfig) -> (StudyManifest, Vec<(usize, Vec<usize>)>) {
        let t_hi = tempfile::tempdir().unwrap();
        let t_lo = tempfile::tempdir().unwrap();
        let m_hi = generate_dataset(cfg, t_hi.path()).unwrap();
        let mut cfg_lo = cfg.clone();
        cfg_lo.lesion_intensity_boost = 1e-6;
        let m_lo = generate_dataset(&cfg_lo, t_lo.path()).unwrap();

        let mut out = Vec::new();
        for (i, rec) in m_hi.entries.iter().enumerate() {
            let v_hi = crate::volume::load_volume(&m_hi.root_path, rec).unwrap();
            let v_lo = crate::volume::load_volume(&m_lo.root_path, &m_lo.entries[i]).unwrap();
            let mut touched = Vec::new();
            for z in 0..rec.n_slices {
                let a = v_hi.data.index_axis(ndarray::Axis(0), z);
                let b = v_lo.data.index_axis(ndarray::Axis(0), z);
                let delta: u64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| u64::from(x.abs_diff(y)))
                    .sum();
                if delta > 50 {
                    touched.push(z);
                }
            }
            out.push((i, touched));
        }
        (m_hi, out)
    }

    #[test]
    fn lesions_span_exact_z_extent_on_abnormal_side_only() {
        let cfg = tiny_config(11);
        let (manifest, diffs) = lesion_diff_slices(&cfg);
        for (i, touched) in diffs {
            let rec = &manifest.entries[i];
            match rec.class_label {
                ClassLabel::Normal => {
                    assert!(touched.is_empty(), "normal volume {i} touched: {touched:?}");
                }
                ClassLabel::Abnormal => {
                    assert_eq!(touched.len(), cfg.lesion_z_extent, "volume {i}");
                    for w in touched.windows(2) {
                        assert_eq!(w[1], w[0] + 1, "non-consecutive lesion slices");
                    }
                    // slice_label with window = z_extent/2 covers every lesion slice
                    let window = cfg.lesion_z_extent / 2;
                    for &z in &touched {
                        assert_eq!(slice_label(rec, z, window).unwrap(), ClassLabel::Abnormal);
                    }
                }
            }
        }
    }

    #[test]
    fn lesion_bbox_contrast_exceeds_half_boost() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(5);
        let m = generate_dataset(&cfg, tmp.path()).unwrap();
        let mut checked = 0;
        for rec in &m.entries {
            let Some(annot) = &rec.annotation else {
                continue;
            };
            let v = crate::volume::load_volume(&m.root_path, rec).unwrap();
            let s = v.slice_f32(annot.slice_index);
            let b = annot.bbox;
            let mut inside = Vec::new();
            let mut outside = Vec::new();
            for ((y, x), &val) in s.indexed_iter() {
                let in_box = (x as u32) >= b.x
                    && (x as u32) < b.x + b.w
                    && (y as u32) >= b.y
                    && (y as u32) < b.y + b.h;
                if in_box {
                    inside.push(f64::from(val));
                } else {
                    outside.push(f64::from(val));
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let margin = mean(&inside) - mean(&outside);
            assert!(
                margin >= cfg.lesion_intensity_boost / 2.0,
                "volume {} margin {margin}",
                rec.volume_id()
            );
            checked += 1;
        }
        assert!(checked >= 2);
    }

    #[test]
    fn infeasible_geometry_rejected() {
        let cfg = SynthConfig {
            slice_height: 20,
            slice_width: 20,
            lesion_radius_min: 9,
            lesion_radius_max: 16,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg2 = SynthConfig {
            lesion_z_extent: 99,
            ..SynthConfig::default()
        };
        assert!(cfg2.validate().is_err());
    }
}
