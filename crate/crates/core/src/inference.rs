//! Multi-patch slice scoring, volume-level max aggregation, and selection of
//! the operating threshold that balances normal and abnormal recall.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{slice_label, ClassLabel, StudyManifest};
use crate::derived_rng;
use crate::error::{Error, Result};
use crate::finetune::{sample_patch, PatchMode};
use crate::models::{to_input_tensor, Classifier};
use crate::nn::softmax_prob_class1;
use crate::volume::VolumeCache;

/// Per-patch abnormal probabilities of one slice, one forward pass for all
/// `n_patches` unconstrained windows.
pub fn score_slice_probs(
    model: &Classifier<f32>,
    slice: &Array2<f32>,
    n_patches: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n_patches == 0 {
        return Err(Error::InvalidInput("n_patches must be >= 1".into()));
    }
    let mut patches = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let p = sample_patch(
            slice,
            ClassLabel::Normal,
            None,
            patch_size,
            PatchMode::Eval,
            rng,
        )?;
        patches.push(p.patch);
    }
    let x = to_input_tensor::<f32>(&patches);
    let logits = model.logits(&x);
    Ok(softmax_prob_class1(&logits))
}

/// Mean abnormal probability over `n_patches` random patches, with the patch
/// scorer abstracted so the aggregation rule is testable on its own.
pub fn score_slice_with<S>(
    mut patch_score: S,
    slice: &Array2<f32>,
    n_patches: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    S: FnMut(&Array2<f32>) -> f64,
{
    if n_patches == 0 {
        return Err(Error::InvalidInput("n_patches must be >= 1".into()));
    }
    let mut sum = 0.0;
    for _ in 0..n_patches {
        let p = sample_patch(
            slice,
            ClassLabel::Normal,
            None,
            patch_size,
            PatchMode::Eval,
            rng,
        )?;
        sum += patch_score(&p.patch);
    }
    Ok(sum / n_patches as f64)
}

/// Mean abnormal probability of one slice under the real model.
pub fn score_slice(
    model: &Classifier<f32>,
    slice: &Array2<f32>,
    n_patches: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let probs = score_slice_probs(model, slice, n_patches, patch_size, rng)?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Volume score = max over slice scores; no extra learnable parameters.
pub fn score_volume(slice_scores: &[f64]) -> Result<f64> {
    if slice_scores.is_empty() {
        return Err(Error::InvalidInput("empty slice score list".into()));
    }
    Ok(slice_scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Picks the threshold minimizing |NormalRecall - AbnormalRecall| over the
/// candidate set (midpoints between consecutive distinct sorted scores plus
/// below-min and above-max sentinels). Classification is abnormal iff
/// score >= t. Ties break toward higher normal recall, then lower threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput("scores/labels mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "both classes required to select a threshold".into(),
        ));
    }

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0] - 1.0);
    for w in distinct.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);

    let mut best: Option<(f64, f64, f64)> = None; // (gap, -nr, t)
    for &t in &candidates {
        let mut tp = 0usize;
        let mut tn = 0usize;
        for (&s, &l) in scores.iter().zip(labels.iter()) {
            if l && s >= t {
                tp += 1;
            }
            if !l && s < t {
                tn += 1;
            }
        }
        let ar = tp as f64 / n_pos as f64;
        let nr = tn as f64 / n_neg as f64;
        let gap = (nr - ar).abs();
        let key = (gap, -nr, t);
        let better = match &best {
            None => true,
            Some(b) => key < *b,
        };
        if better {
            best = Some(key);
        }
    }
    Ok(best.unwrap().2)
}

// ---------------------------------------------------------------------------
// Score tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub volume_id: String,
    pub slice_index: usize,
    pub score: f64,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume_id: String,
    pub score: f64,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub slices: Vec<SliceScore>,
    pub volumes: Vec<VolumeScore>,
}

impl ScoreTable {
    pub fn slice_scores_labels(&self) -> (Vec<f64>, Vec<bool>) {
        (
            self.slices.iter().map(|s| s.score).collect(),
            self.slices
                .iter()
                .map(|s| s.label == ClassLabel::Abnormal)
                .collect(),
        )
    }

    pub fn volume_scores_labels(&self) -> (Vec<f64>, Vec<bool>) {
        (
            self.volumes.iter().map(|s| s.score).collect(),
            self.volumes
                .iter()
                .map(|s| s.label == ClassLabel::Abnormal)
                .collect(),
        )
    }

    pub fn write_csv(&self, scores_path: &Path, volumes_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(scores_path)
            .map_err(|e| Error::InvalidInput(format!("cannot write scores csv: {e}")))?;
        w.write_record(["volume_id", "slice_index", "score", "label"])
            .and_then(|_| {
                self.slices.iter().try_for_each(|s| {
                    w.write_record([
                        s.volume_id.as_str(),
                        &s.slice_index.to_string(),
                        &format!("{:.17e}", s.score),
                        &s.label.to_string(),
                    ])
                })
            })
            .map_err(|e| Error::InvalidInput(format!("scores csv: {e}")))?;
        w.flush().map_err(|e| Error::io(scores_path, e))?;

        let mut w = csv::Writer::from_path(volumes_path)
            .map_err(|e| Error::InvalidInput(format!("cannot write volumes csv: {e}")))?;
        w.write_record(["volume_id", "score", "label"])
            .and_then(|_| {
                self.volumes.iter().try_for_each(|v| {
                    w.write_record([
                        v.volume_id.as_str(),
                        &format!("{:.17e}", v.score),
                        &v.label.to_string(),
                    ])
                })
            })
            .map_err(|e| Error::InvalidInput(format!("volumes csv: {e}")))?;
        w.flush().map_err(|e| Error::io(volumes_path, e))?;
        Ok(())
    }

    pub fn read_csv(scores_path: &Path, volumes_path: &Path) -> Result<ScoreTable> {
        let parse_label = |s: &str| -> Result<ClassLabel> {
            match s {
                "normal" => Ok(ClassLabel::Normal),
                "abnormal" => Ok(ClassLabel::Abnormal),
                other => Err(Error::InvalidInput(format!("bad label {other:?}"))),
            }
        };
        let mut slices = Vec::new();
        let mut r = csv::Reader::from_path(scores_path).map_err(|e| {
            Error::InvalidInput(format!("cannot read {}: {e}", scores_path.display()))
        })?;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::InvalidInput(e.to_string()))?;
            slices.push(SliceScore {
                volume_id: rec[0].to_string(),
                slice_index: rec[1]
                    .parse()
                    .map_err(|e| Error::InvalidInput(format!("bad slice_index: {e}")))?,
                score: rec[2]
                    .parse()
                    .map_err(|e| Error::InvalidInput(format!("bad score: {e}")))?,
                label: parse_label(&rec[3])?,
            });
        }
        let mut volumes = Vec::new();
        let mut r = csv::Reader::from_path(volumes_path).map_err(|e| {
            Error::InvalidInput(format!("cannot read {}: {e}", volumes_path.display()))
        })?;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::InvalidInput(e.to_string()))?;
            volumes.push(VolumeScore {
                volume_id: rec[0].to_string(),
                score: rec[1]
                    .parse()
                    .map_err(|e| Error::InvalidInput(format!("bad score: {e}")))?,
                label: parse_label(&rec[2])?,
            });
        }
        Ok(ScoreTable { slices, volumes })
    }
}

/// Per-slice probabilities for up to `n_max` patches, so one expensive pass
/// can be re-aggregated for any smaller patch count.
#[derive(Debug, Clone)]
pub struct SlicePatchProbs {
    pub volume_id: String,
    pub volume_index: usize,
    pub slice_index: usize,
    pub probs: Vec<f64>,
    pub label: ClassLabel,
}

pub fn evaluate_patch_probs(
    model: &Classifier<f32>,
    manifest: &StudyManifest,
    n_max: usize,
    patch_size: usize,
    label_window: usize,
    seed: u64,
) -> Result<Vec<SlicePatchProbs>> {
    if n_max == 0 {
        return Err(Error::InvalidInput("n_patches must be >= 1".into()));
    }
    let cache = VolumeCache::new(manifest);
    let refs: Vec<(usize, usize)> = manifest
        .entries
        .iter()
        .enumerate()
        .flat_map(|(v, rec)| (0..rec.n_slices).map(move |z| (v, z)))
        .collect();
    let rows: Vec<Result<SlicePatchProbs>> = refs
        .par_iter()
        .map(|&(v, z)| {
            let rec = &manifest.entries[v];
            let vol = cache.get(manifest, v)?;
            let slice = vol.slice_f32(z);
            // Draws depend only on (seed, volume, slice): all patch counts
            // share the same patch sequence prefix.
            let mut rng = derived_rng(seed, &[40, v as u64, z as u64]);
            let probs = score_slice_probs(model, &slice, n_max, patch_size, &mut rng)?;
            Ok(SlicePatchProbs {
                volume_id: rec.volume_id(),
                volume_index: v,
                slice_index: z,
                probs,
                label: slice_label(rec, z, label_window)?,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        out.push(r?);
    }
    Ok(out)
}

/// Builds a score table using the first `n` patch probabilities per slice.
pub fn table_from_probs(
    manifest: &StudyManifest,
    probs: &[SlicePatchProbs],
    n: usize,
) -> Result<ScoreTable> {
    let mut slices = Vec::with_capacity(probs.len());
    for p in probs {
        if p.probs.len() < n || n == 0 {
            return Err(Error::InvalidInput(format!(
                "requested {n} patches but only {} scored",
                p.probs.len()
            )));
        }
        let score = p.probs[..n].iter().sum::<f64>() / n as f64;
        slices.push(SliceScore {
            volume_id: p.volume_id.clone(),
            slice_index: p.slice_index,
            score,
            label: p.label,
        });
    }
    slices.sort_by(|a, b| (&a.volume_id, a.slice_index).cmp(&(&b.volume_id, b.slice_index)));

    let mut volumes = Vec::with_capacity(manifest.entries.len());
    for rec in &manifest.entries {
        let vid = rec.volume_id();
        let vol_scores: Vec<f64> = slices
            .iter()
            .filter(|s| s.volume_id == vid)
            .map(|s| s.score)
            .collect();
        volumes.push(VolumeScore {
            volume_id: vid,
            score: score_volume(&vol_scores)?,
            label: rec.class_label,
        });
    }
    volumes.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
    Ok(ScoreTable { slices, volumes })
}

/// Scores every slice of every volume with `n_patches` patches and rolls the
/// results up to volume level. Deterministic given the seed.
pub fn evaluate(
    model: &Classifier<f32>,
    manifest: &StudyManifest,
    n_patches: usize,
    patch_size: usize,
    label_window: usize,
    seed: u64,
) -> Result<ScoreTable> {
    let probs = evaluate_patch_probs(model, manifest, n_patches, patch_size, label_window, seed)?;
    table_from_probs(manifest, &probs, n_patches)
}
