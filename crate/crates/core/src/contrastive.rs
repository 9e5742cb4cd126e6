//! Momentum-contrast pre-training: InfoNCE loss against a FIFO memory queue
//! of past keys, an EMA momentum encoder, and cosine schedules for both the
//! learning rate and the momentum coefficient.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SliceRef, StudyManifest};
use crate::error::{Error, Result};
use crate::models::{to_input_tensor, ContrastiveModel, EncoderSpec};
use crate::nn::{Float, ParamGroup, Sgd};
use crate::sampler::{
    augment, is_negative_volumes, sample_positive, AugmentParams, PairKind, PairPolicy,
};
use crate::volume::VolumeCache;
use crate::{derived_rng, nn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// EMA momentum schedule endpoints; the momentum follows a cosine from
    /// `momentum_start` to `momentum_end` over training.
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub queue_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// When set, queue keys that are positive-eligible for the anchor
    /// (same volume or other view of the same side) are masked out of the
    /// denominator.
    pub strict_queue_filter: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.2,
            momentum_start: 0.99,
            momentum_end: 1.0,
            queue_size: 4096,
            epochs: 4000,
            batch_size: 128,
            base_lr: 1.5e-2,
            final_lr: 0.0,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            strict_queue_filter: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        for m in [self.momentum_start, self.momentum_end] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config("momentum must be in [0, 1]".into()));
            }
        }
        if self.queue_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "queue_size, batch_size and epochs must be >= 1".into(),
            ));
        }
        if self.batch_size > self.queue_size {
            return Err(Error::Config(
                "batch_size must not exceed queue_size".into(),
            ));
        }
        if self.base_lr < 0.0 || self.final_lr < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Memory queue
// ---------------------------------------------------------------------------

/// Fixed-capacity FIFO ring of L2-normalized key embeddings, each tagged with
/// the volume it came from (for the optional strict filter).
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    keys: Array2<f32>,
    sources: Vec<u32>,
    len: usize,
    cursor: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryQueue {
            capacity,
            dim,
            keys: Array2::zeros((capacity, dim)),
            sources: vec![u32::MAX; capacity],
            len: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Appends a batch of keys, evicting the oldest entries FIFO.
    pub fn enqueue(&mut self, keys: ArrayView2<'_, f32>, sources: &[u32]) -> Result<()> {
        let (n, d) = keys.dim();
        if d != self.dim {
            return Err(Error::InvalidInput(format!(
                "key dim {d} does not match queue dim {}",
                self.dim
            )));
        }
        if n != sources.len() {
            return Err(Error::InvalidInput("keys/sources length mismatch".into()));
        }
        if n > self.capacity {
            return Err(Error::InvalidInput(format!(
                "batch of {n} keys exceeds queue capacity {}",
                self.capacity
            )));
        }
        for (row, &src) in keys.outer_iter().zip(sources.iter()) {
            self.keys.row_mut(self.cursor).assign(&row);
            self.sources[self.cursor] = src;
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Current keys in FIFO order (oldest first), shape (len, dim).
    pub fn contents(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.len, self.dim));
        for i in 0..self.len {
            let idx = if self.len < self.capacity {
                i
            } else {
                (self.cursor + i) % self.capacity
            };
            out.row_mut(i).assign(&self.keys.row(idx));
        }
        out
    }

    /// Source volume tags aligned with [`Self::contents`].
    pub fn content_sources(&self) -> Vec<u32> {
        (0..self.len)
            .map(|i| {
                let idx = if self.len < self.capacity {
                    i
                } else {
                    (self.cursor + i) % self.capacity
                };
                self.sources[idx]
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// Scalar InfoNCE: -log( exp(q.k+ / tau) / sum_i exp(q.k_i / tau) ), the sum
/// running over the positive plus all negatives. Accumulates in f64 with a
/// log-sum-exp so the uniform-logit case is exact.
pub fn info_nce_loss<F: Float>(
    query: ArrayView1<'_, F>,
    positive: ArrayView1<'_, F>,
    negatives: ArrayView2<'_, F>,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    let d = query.len();
    if positive.len() != d || (negatives.ncols() != d && negatives.nrows() > 0) {
        return Err(Error::InvalidInput(format!(
            "embedding dimension mismatch: query {d}, positive {}, negatives {}",
            positive.len(),
            negatives.ncols()
        )));
    }
    let dot = |a: ArrayView1<'_, F>, b: ArrayView1<'_, F>| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| x.to_f64().unwrap() * y.to_f64().unwrap())
            .sum()
    };
    let mut logits = Vec::with_capacity(1 + negatives.nrows());
    logits.push(dot(query, positive) / tau);
    for row in negatives.outer_iter() {
        logits.push(dot(query, row) / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Batched InfoNCE against the queue, returning the mean loss and dL/dq.
/// `mask[i][j] == false` removes queue entry `j` from sample `i`'s
/// denominator. Gradients never flow into `keys` or `queue`.
pub fn info_nce_batch<F: Float>(
    q: &Array2<F>,
    keys: &Array2<F>,
    queue: ArrayView2<'_, F>,
    tau: f64,
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, Array2<F>)> {
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    let (n, d) = q.dim();
    if keys.dim() != (n, d) {
        return Err(Error::InvalidInput("query/key shape mismatch".into()));
    }
    let s = queue.nrows();
    let mut dq = Array2::<F>::zeros((n, d));
    let mut total_loss = 0.0f64;
    for i in 0..n {
        let qi = q.row(i);
        let ki = keys.row(i);
        let dot = |b: ArrayView1<'_, F>| -> f64 {
            qi.iter()
                .zip(b.iter())
                .map(|(&x, &y)| x.to_f64().unwrap() * y.to_f64().unwrap())
                .sum()
        };
        let mut logits = vec![dot(ki) / tau];
        let mut used: Vec<usize> = Vec::with_capacity(s);
        for j in 0..s {
            if let Some(m) = mask {
                if !m[i][j] {
                    continue;
                }
            }
            logits.push(dot(queue.row(j)) / tau);
            used.push(j);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        total_loss += max + z.ln() - logits[0];

        // dL/dq = ((p0 - 1) k+ + sum_j p_j queue_j) / tau, averaged over batch
        let scale = 1.0 / (tau * n as f64);
        let p0 = (logits[0] - max).exp() / z;
        for (col, &kv) in ki.iter().enumerate() {
            dq[[i, col]] += nn::f::<F>((p0 - 1.0) * kv.to_f64().unwrap() * scale);
        }
        for (idx, &j) in used.iter().enumerate() {
            let p = (logits[idx + 1] - max).exp() / z;
            let row = queue.row(j);
            for (col, &qv) in row.iter().enumerate() {
                dq[[i, col]] += nn::f::<F>(p * qv.to_f64().unwrap() * scale);
            }
        }
    }
    Ok((total_loss / n as f64, dq))
}

// ---------------------------------------------------------------------------
// EMA and schedules
// ---------------------------------------------------------------------------

/// EMA update of the momentum model: theta' <- m * theta' + (1 - m) * theta.
/// The online model is untouched and no gradients are involved.
pub fn ema_update<F: Float>(
    momentum_model: &mut ContrastiveModel<F>,
    online: &ContrastiveModel<F>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidInput("EMA momentum must be in [0, 1]".into()));
    }
    let src = online.param_slots();
    let dst = momentum_model.param_slots_mut();
    if src.len() != dst.len() {
        return Err(Error::Training("EMA structure mismatch".into()));
    }
    for (d, s) in dst.into_iter().zip(src.iter()) {
        if d.meta.name != s.meta.name {
            return Err(Error::Training(format!(
                "EMA structure mismatch: {} vs {}",
                d.meta.name, s.meta.name
            )));
        }
        nn::ema_update_params(d.param, s.param, m)?;
    }
    Ok(())
}

/// Cosine interpolation from `start` (step 0) to `end` (step = total_steps).
pub fn cosine_schedule(step: usize, total_steps: usize, start: f64, end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidInput("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

// ---------------------------------------------------------------------------
// Pre-training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub same_slice: u64,
    pub inter_slice: u64,
    pub inter_view: u64,
    pub cross_volume: u64,
}

impl PairCounts {
    fn record(&mut self, kind: PairKind) {
        match kind {
            PairKind::SameSlice => self.same_slice += 1,
            PairKind::InterSlice => self.inter_slice += 1,
            PairKind::InterView => self.inter_view += 1,
            PairKind::CrossVolume => self.cross_volume += 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub momentum: f64,
    pub pairs: PairCounts,
}

pub struct PretrainOutput {
    pub model: ContrastiveModel<f32>,
    pub history: Vec<EpochStats>,
}

/// Runs the full momentum-contrast loop and returns the online model.
pub fn pretrain(
    manifest: &StudyManifest,
    policy: &PairPolicy,
    augment_params: &AugmentParams,
    config: &ContrastiveConfig,
    spec: &EncoderSpec,
    seed: u64,
) -> Result<PretrainOutput> {
    config.validate()?;
    policy.validate()?;
    augment_params.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::Training("empty manifest".into()));
    }

    let anchors: Vec<SliceRef> = manifest
        .entries
        .iter()
        .enumerate()
        .flat_map(|(v, rec)| {
            (0..rec.n_slices).map(move |z| SliceRef {
                volume: v,
                slice_index: z,
            })
        })
        .collect();

    let cache = VolumeCache::new(manifest);
    let mut online = ContrastiveModel::<f32>::build(spec, &mut derived_rng(seed, &[10]))?;
    let mut momentum_model = online.clone();
    let mut queue = MemoryQueue::new(config.queue_size, spec.embedding_dim);

    let groups: Vec<ParamGroup> = (0..spec.n_blocks())
        .map(|block| ParamGroup {
            block,
            lr: 1.0,
            trainable: true,
        })
        .collect();
    let mut opt = Sgd::<f32>::new(groups, config.sgd_momentum, config.weight_decay);

    let steps_per_epoch = anchors.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut history = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut derived_rng(seed, &[11, epoch as u64]),
        );

        let mut loss_sum = 0.0f64;
        let mut pairs = PairCounts::default();
        let mut lr = 0.0;
        let mut m = config.momentum_start;

        for batch_indices in order.chunks(config.batch_size) {
            // Pair sampling + augmentation, parallel with per-sample streams.
            type Prepared = (ndarray::Array2<f32>, ndarray::Array2<f32>, PairKind, u32);
            let prepared: Vec<Result<Prepared>> = batch_indices
                .par_iter()
                .enumerate()
                .map(|(i, &ai)| {
                    let anchor = anchors[ai];
                    let mut rng = derived_rng(seed, &[12, global_step as u64, i as u64]);
                    let pair = sample_positive(anchor, manifest, policy, &mut rng)?;
                    let anchor_vol = cache.get(manifest, anchor.volume)?;
                    let pos_vol = cache.get(manifest, pair.positive.volume)?;
                    let query_view = augment(
                        &anchor_vol.slice_f32(anchor.slice_index),
                        augment_params,
                        &mut rng,
                    )?;
                    let key_view = augment(
                        &pos_vol.slice_f32(pair.positive.slice_index),
                        augment_params,
                        &mut rng,
                    )?;
                    Ok((query_view, key_view, pair.pair_kind, anchor.volume as u32))
                })
                .collect();

            let mut query_views = Vec::with_capacity(batch_indices.len());
            let mut key_views = Vec::with_capacity(batch_indices.len());
            let mut anchor_vols = Vec::with_capacity(batch_indices.len());
            for p in prepared {
                let (qv, kv, kind, vol) = p?;
                pairs.record(kind);
                query_views.push(qv);
                key_views.push(kv);
                anchor_vols.push(vol);
            }

            let qx = to_input_tensor::<f32>(&query_views);
            let kx = to_input_tensor::<f32>(&key_views);
            let (q, q_cache) = online.forward(&qx);
            // Key path: momentum encoder, no cache kept, no gradient.
            let k = momentum_model.embed(&kx);

            let negatives = queue.contents();
            let mask = if config.strict_queue_filter && !queue.is_empty() {
                let sources = queue.content_sources();
                Some(
                    anchor_vols
                        .iter()
                        .map(|&av| {
                            sources
                                .iter()
                                .map(|&sv| is_negative_volumes(manifest, av as usize, sv as usize))
                                .collect::<Vec<bool>>()
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let (loss, dq) = info_nce_batch(
                &q,
                &k,
                negatives.view(),
                config.temperature,
                mask.as_deref(),
            )?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {global_step}"
                )));
            }
            loss_sum += loss;

            online.zero_grad();
            online.backward(&q_cache, &dq);
            lr = cosine_schedule(global_step, total_steps, config.base_lr, config.final_lr)?;
            opt.lr_scale = lr;
            opt.step(online.param_slots_mut());

            m = cosine_schedule(
                global_step,
                total_steps,
                config.momentum_start,
                config.momentum_end,
            )?;
            ema_update(&mut momentum_model, &online, m)?;

            queue.enqueue(k.view(), &anchor_vols)?;
            global_step += 1;
        }

        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            lr,
            momentum: m,
            pairs,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4}, lr {:.5}, m {:.5}",
            stats.mean_loss,
            stats.lr,
            stats.momentum
        );
        history.push(stats);
    }

    Ok(PretrainOutput {
        model: online,
        history,
    })
}
