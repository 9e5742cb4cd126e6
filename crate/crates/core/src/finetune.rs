//! Local multi-patch supervised fine-tuning: constrained patch sampling,
//! balanced batching, and three fine-tuning strategies (linear probe, full,
//! and per-block discriminative learning rates).

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{slice_label, BBox, ClassLabel, StudyManifest};
use crate::error::{Error, Result};
use crate::inference::score_slice_probs;
use crate::models::{
    apply_weights, to_input_tensor, Classifier, EncoderSpec, LoadReport, LoadedCheckpoint,
};
use crate::nn::{softmax_cross_entropy, ParamGroup, Sgd};
use crate::preprocess::CropRect;
use crate::volume::VolumeCache;
use crate::{contrastive::cosine_schedule, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    LinearProbe,
    Full,
    Discriminative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub patch_size: usize,
    pub mode: FinetuneMode,
    pub base_lr: f64,
    /// Per-block learning-rate decay factor for discriminative fine-tuning.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Abnormal fraction targeted in each batch.
    pub target_batch_ratio: f64,
    /// Expected number of draws of each abnormal slice per epoch.
    pub abnormal_draws_per_epoch: f64,
    pub max_batches_per_epoch: Option<usize>,
    /// Drop normal-labeled slices of abnormal volumes from the normal pool.
    pub exclude_abnormal_volumes_from_normals: bool,
    /// Patches per slice when scoring the validation split.
    pub val_patches: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            patch_size: 448,
            mode: FinetuneMode::Discriminative,
            base_lr: 1e-2,
            eta: 2.8,
            epochs: 50,
            batch_size: 64,
            target_batch_ratio: 0.5,
            abnormal_draws_per_epoch: 4.0,
            max_batches_per_epoch: None,
            exclude_abnormal_volumes_from_normals: false,
            val_patches: 1,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.eta <= 1.0 {
            return Err(Error::Config("eta must be > 1".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "epochs >= 1 and batch_size >= 2 required".into(),
            ));
        }
        if !(0.0 < self.target_batch_ratio && self.target_batch_ratio < 1.0) {
            return Err(Error::Config("target_batch_ratio must be in (0, 1)".into()));
        }
        if self.abnormal_draws_per_epoch <= 0.0 {
            return Err(Error::Config("abnormal_draws_per_epoch must be > 0".into()));
        }
        if self.val_patches == 0 {
            return Err(Error::Config("val_patches must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// Reflect-pads `image` on the bottom/right so both dimensions reach at least
/// (min_h, min_w). Original pixel coordinates are unchanged.
pub fn pad_reflect_to(image: &Array2<f32>, min_h: usize, min_w: usize) -> Array2<f32> {
    let (h, w) = image.dim();
    if h >= min_h && w >= min_w {
        return image.clone();
    }
    let nh = h.max(min_h);
    let nw = w.max(min_w);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            return i;
        }
        let period = (2 * n).saturating_sub(2).max(1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    Array2::from_shape_fn((nh, nw), |(y, x)| image[[reflect(y, h), reflect(x, w)]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// Tumor containment enforced for abnormal slices.
    Train,
    /// Unconstrained windows.
    Eval,
}

#[derive(Debug, Clone)]
pub struct PatchSample {
    pub window: CropRect,
    pub label: ClassLabel,
    pub patch: Array2<f32>,
}

/// Per-axis window range: positions fully containing [lo, lo+len) when it
/// fits in the patch, otherwise positions containing its center pixel.
fn axis_range(lo: usize, len: usize, patch: usize, extent: usize) -> (usize, usize) {
    let max_start = extent - patch;
    if len <= patch {
        let min = (lo + len).saturating_sub(patch);
        let max = lo.min(max_start);
        (min, max)
    } else {
        let center = lo + len / 2;
        let min = (center + 1).saturating_sub(patch);
        let max = center.min(max_start);
        (min, max)
    }
}

/// Samples one square patch window. In [`PatchMode::Train`] with an abnormal
/// label, the window must contain the annotation bbox (or its center pixel
/// when the bbox exceeds the patch); slices smaller than the patch are
/// reflect-padded first.
pub fn sample_patch(
    slice_image: &Array2<f32>,
    label: ClassLabel,
    bbox: Option<&BBox>,
    patch_size: usize,
    mode: PatchMode,
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    if patch_size == 0 {
        return Err(Error::InvalidInput("patch_size must be >= 1".into()));
    }
    let padded = pad_reflect_to(slice_image, patch_size, patch_size);
    let (h, w) = padded.dim();

    let constrained = mode == PatchMode::Train && label == ClassLabel::Abnormal;
    let (x_range, y_range) = if constrained {
        let bbox = bbox.ok_or_else(|| {
            Error::InvalidInput("abnormal training sample requires an annotation bbox".into())
        })?;
        (
            axis_range(bbox.x as usize, bbox.w as usize, patch_size, w),
            axis_range(bbox.y as usize, bbox.h as usize, patch_size, h),
        )
    } else {
        ((0, w - patch_size), (0, h - patch_size))
    };

    let x0 = rng.random_range(x_range.0..=x_range.1);
    let y0 = rng.random_range(y_range.0..=y_range.1);
    let window = CropRect {
        x0,
        y0,
        x1: x0 + patch_size,
        y1: y0 + patch_size,
    };
    let patch = padded
        .slice(ndarray::s![window.y0..window.y1, window.x0..window.x1])
        .to_owned();
    Ok(PatchSample {
        window,
        label,
        patch,
    })
}

// ---------------------------------------------------------------------------
// Discriminative learning rates
// ---------------------------------------------------------------------------

/// Learning rate of the block `j` steps away from the output: base / eta^j,
/// computed by repeated division so adjacent blocks keep the exact ratio.
pub fn discriminative_lr(base_lr: f64, eta: f64, j: usize, n_blocks: usize) -> Result<f64> {
    if eta <= 1.0 {
        return Err(Error::InvalidInput("eta must be > 1".into()));
    }
    if j >= n_blocks {
        return Err(Error::InvalidInput(format!(
            "block index {j} out of range for {n_blocks} blocks"
        )));
    }
    let mut lr = base_lr;
    for _ in 0..j {
        lr /= eta;
    }
    Ok(lr)
}

/// Builds optimizer parameter groups for the chosen fine-tuning mode.
/// Blocks are indexed shallowest-first; block `n_blocks - 1` is the head.
pub fn build_param_groups(
    mode: FinetuneMode,
    base_lr: f64,
    eta: f64,
    n_blocks: usize,
) -> Result<Vec<ParamGroup>> {
    (0..n_blocks)
        .map(|block| {
            let from_output = n_blocks - 1 - block;
            Ok(match mode {
                FinetuneMode::LinearProbe => ParamGroup {
                    block,
                    lr: base_lr,
                    trainable: block == n_blocks - 1,
                },
                FinetuneMode::Full => ParamGroup {
                    block,
                    lr: base_lr,
                    trainable: true,
                },
                FinetuneMode::Discriminative => ParamGroup {
                    block,
                    lr: discriminative_lr(base_lr, eta, from_output, n_blocks)?,
                    trainable: true,
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Balanced batches
// ---------------------------------------------------------------------------

/// Infinite stream of balanced batches: abnormal indices drawn with
/// replacement, normal indices without replacement until the pool empties,
/// then reshuffled.
pub struct BalancedBatchIter<R: Rng> {
    abnormal: Vec<usize>,
    normal: Vec<usize>,
    pool: Vec<usize>,
    batch_size: usize,
    n_abnormal_per_batch: usize,
    rng: R,
}

impl<R: Rng> BalancedBatchIter<R> {
    pub fn n_abnormal_per_batch(&self) -> usize {
        self.n_abnormal_per_batch
    }
}

pub fn balanced_batch_indices<R: Rng>(
    labels: &[ClassLabel],
    batch_size: usize,
    target_ratio: f64,
    rng: R,
) -> Result<BalancedBatchIter<R>> {
    let abnormal: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == ClassLabel::Abnormal)
        .map(|(i, _)| i)
        .collect();
    let normal: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == ClassLabel::Normal)
        .map(|(i, _)| i)
        .collect();
    if abnormal.is_empty() {
        return Err(Error::Training("abnormal class is empty".into()));
    }
    if normal.is_empty() {
        return Err(Error::Training("normal class is empty".into()));
    }
    if batch_size < 2 {
        return Err(Error::Training("batch_size must be >= 2".into()));
    }
    let n_abnormal_per_batch =
        ((batch_size as f64 * target_ratio).round() as usize).clamp(1, batch_size - 1);
    Ok(BalancedBatchIter {
        abnormal,
        normal,
        pool: Vec::new(),
        batch_size,
        n_abnormal_per_batch,
        rng,
    })
}

impl<R: Rng> Iterator for BalancedBatchIter<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.n_abnormal_per_batch {
            let pick = self.rng.random_range(0..self.abnormal.len());
            batch.push(self.abnormal[pick]);
        }
        for _ in 0..self.batch_size - self.n_abnormal_per_batch {
            if self.pool.is_empty() {
                self.pool = self.normal.clone();
                rand::seq::SliceRandom::shuffle(self.pool.as_mut_slice(), &mut self.rng);
            }
            batch.push(self.pool.pop().unwrap());
        }
        Some(batch)
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Slice-level validation AUC; absent when the split has one class.
    pub val_auc: Option<f64>,
}

pub struct FinetuneOutput {
    pub model: Classifier<f32>,
    pub history: Vec<FinetuneEpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    /// Checkpoint application report when initialized from a checkpoint.
    pub load_report: Option<LoadReport>,
}

#[derive(Debug, Clone, Copy)]
struct SliceEntry {
    volume: usize,
    slice_index: usize,
    label: ClassLabel,
}

fn collect_slices(
    manifest: &StudyManifest,
    label_window: usize,
    exclude_abnormal_volume_normals: bool,
) -> Result<Vec<SliceEntry>> {
    let mut out = Vec::new();
    for (v, rec) in manifest.entries.iter().enumerate() {
        for z in 0..rec.n_slices {
            let label = slice_label(rec, z, label_window)?;
            if exclude_abnormal_volume_normals
                && label == ClassLabel::Normal
                && rec.class_label == ClassLabel::Abnormal
            {
                continue;
            }
            out.push(SliceEntry {
                volume: v,
                slice_index: z,
                label,
            });
        }
    }
    Ok(out)
}

/// Scores every slice of `manifest` with `n_patches` unconstrained patches
/// and returns (scores, labels). Patch draws depend only on (seed, volume,
/// slice, patch), so repeated calls are comparable.
fn score_split(
    model: &Classifier<f32>,
    manifest: &StudyManifest,
    cache: &VolumeCache,
    label_window: usize,
    n_patches: usize,
    patch_size: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<ClassLabel>)> {
    let entries = collect_slices(manifest, label_window, false)?;
    let scored: Vec<Result<f64>> = entries
        .par_iter()
        .map(|e| {
            let vol = cache.get(manifest, e.volume)?;
            let slice = vol.slice_f32(e.slice_index);
            let mut rng = derived_rng(seed, &[21, e.volume as u64, e.slice_index as u64]);
            let probs = score_slice_probs(model, &slice, n_patches, patch_size, &mut rng)?;
            Ok(probs.iter().sum::<f64>() / probs.len() as f64)
        })
        .collect();
    let mut scores = Vec::with_capacity(entries.len());
    for s in scored {
        scores.push(s?);
    }
    Ok((scores, entries.iter().map(|e| e.label).collect()))
}

/// Fine-tunes a 2-class classifier. `checkpoint = None` trains from random
/// initialization. Model selection keeps the epoch with the highest
/// validation slice-level AUC; when the validation split has a single class
/// the last epoch is kept and a warning is logged.
pub fn finetune(
    checkpoint: Option<&LoadedCheckpoint>,
    spec: &EncoderSpec,
    train: &StudyManifest,
    val: &StudyManifest,
    config: &FinetuneConfig,
    label_window: usize,
    seed: u64,
) -> Result<FinetuneOutput> {
    config.validate()?;
    let mut model = Classifier::<f32>::build(spec, &mut derived_rng(seed, &[30]))?;
    let load_report = match checkpoint {
        Some(ckpt) => Some(apply_weights(model.param_slots_mut(), &ckpt.weights)?),
        None => None,
    };

    let entries = collect_slices(
        train,
        label_window,
        config.exclude_abnormal_volumes_from_normals,
    )?;
    let labels: Vec<ClassLabel> = entries.iter().map(|e| e.label).collect();
    let n_abnormal = labels
        .iter()
        .filter(|&&l| l == ClassLabel::Abnormal)
        .count();

    let mut batcher = balanced_batch_indices(
        &labels,
        config.batch_size,
        config.target_batch_ratio,
        derived_rng(seed, &[31]),
    )?;
    let batches_per_epoch = {
        let want = (config.abnormal_draws_per_epoch * n_abnormal as f64
            / batcher.n_abnormal_per_batch() as f64)
            .ceil() as usize;
        let want = want.max(1);
        config
            .max_batches_per_epoch
            .map_or(want, |cap| want.min(cap.max(1)))
    };

    let n_blocks = spec.n_blocks();
    let groups = build_param_groups(config.mode, config.base_lr, config.eta, n_blocks)?;
    let mut opt = Sgd::<f32>::new(groups, config.sgd_momentum, config.weight_decay);

    let cache = VolumeCache::new(train);
    let val_cache = VolumeCache::new(val);
    let total_steps = batches_per_epoch * config.epochs;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        for _ in 0..batches_per_epoch {
            let batch = batcher.next().unwrap();
            let prepared: Vec<Result<(Array2<f32>, usize)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let e = entries[idx];
                    let rec = &train.entries[e.volume];
                    let vol = cache.get(train, e.volume)?;
                    let slice = vol.slice_f32(e.slice_index);
                    let bbox = rec.annotation.as_ref().map(|a| a.bbox);
                    let mut rng = derived_rng(seed, &[32, global_step as u64, i as u64]);
                    let patch = sample_patch(
                        &slice,
                        e.label,
                        bbox.as_ref(),
                        config.patch_size,
                        PatchMode::Train,
                        &mut rng,
                    )?;
                    let target = match e.label {
                        ClassLabel::Normal => 0usize,
                        ClassLabel::Abnormal => 1usize,
                    };
                    Ok((patch.patch, target))
                })
                .collect();

            let mut patches = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for p in prepared {
                let (patch, target) = p?;
                patches.push(patch);
                targets.push(target);
            }

            let x = to_input_tensor::<f32>(&patches);
            let (logits, fwd_cache) = model.forward(&x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {global_step}"
                )));
            }
            loss_sum += loss;

            model.zero_grad();
            model.backward(&fwd_cache, &dlogits);
            opt.lr_scale = cosine_schedule(global_step, total_steps, 1.0, 0.0)?;
            opt.step(model.param_slots_mut());
            global_step += 1;
        }

        let val_auc = {
            let (scores, val_labels) = score_split(
                &model,
                val,
                &val_cache,
                label_window,
                config.val_patches,
                config.patch_size,
                seed,
            )?;
            let y: Vec<bool> = val_labels
                .iter()
                .map(|&l| l == ClassLabel::Abnormal)
                .collect();
            match crate::metrics::auc(&scores, &y) {
                Ok(a) => Some(a),
                Err(_) => {
                    log::warn!("validation split has a single slice class; AUC undefined");
                    None
                }
            }
        };

        let stats = FinetuneEpochStats {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_auc,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.4}, val_auc {:?}",
            stats.train_loss,
            stats.val_auc
        );
        if let Some(auc) = val_auc {
            let better = match &best {
                Some((_, best_auc, _)) => auc > *best_auc,
                None => true,
            };
            if better {
                let snapshot: Vec<Vec<f32>> = model
                    .param_slots()
                    .iter()
                    .map(|s| s.param.to_vec())
                    .collect();
                best = Some((epoch, auc, snapshot));
            }
        }
        history.push(stats);
    }

    let (best_epoch, best_val_auc) = match best {
        Some((epoch, auc, snapshot)) => {
            for (slot, data) in model.param_slots_mut().into_iter().zip(snapshot.iter()) {
                slot.param.copy_from_slice(data);
            }
            (epoch, Some(auc))
        }
        None => (config.epochs.saturating_sub(1), None),
    };

    Ok(FinetuneOutput {
        model,
        history,
        best_epoch,
        best_val_auc,
        load_report,
    })
}
