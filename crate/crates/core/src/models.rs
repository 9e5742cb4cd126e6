//! Encoder/classifier backbones with an ordered block partition for per-block
//! learning rates, a projection head for contrastive training, and the
//! named-weights checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, l2_normalize_backward, l2_normalize_rows, relu2,
    relu_backward2, ConvUnit, Float, L2NormCache, Linear, LinearCache, ParamSlot, ParamSlotMut,
    ResBlock, Stage, StageCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SmallCnn,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_height: usize,
    pub input_width: usize,
    pub embedding_dim: usize,
    /// Channel multiplier; stage widths scale linearly with it.
    pub base_width: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::SmallCnn,
            input_height: 448,
            input_width: 448,
            embedding_dim: 128,
            base_width: 8,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::Config("embedding_dim must be >= 8".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.input_height < 16 || self.input_width < 16 {
            return Err(Error::Config("input size must be at least 16x16".into()));
        }
        Ok(())
    }

    /// Number of parameter blocks: stages plus the shared head block.
    pub fn n_blocks(&self) -> usize {
        match self.kind {
            EncoderKind::SmallCnn => 8, // 7 conv stages + head
            EncoderKind::Residual => 6, // stem + 4 stages + head
        }
    }
}

/// Feature extractor: ordered stages, global average pooling, and a linear
/// embedding layer. Stage `i` is parameter block `i`; the embedding layer
/// belongs to the final (head) block together with whatever head sits on top.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub spec: EncoderSpec,
    stages: Vec<Stage<F>>,
    embed: Linear<F>,
}

pub struct EncoderCache<F> {
    stage_caches: Vec<StageCache<F>>,
    pooled_hw: (usize, usize),
    embed_cache: LinearCache<F>,
}

impl<F: Float> Encoder<F> {
    pub fn build(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let mut stages = Vec::new();
        let final_channels = 8 * w;
        match spec.kind {
            EncoderKind::SmallCnn => {
                // 7 conv layers, stride 2 on every other layer.
                let plan = [
                    (1, w, 2),
                    (w, 2 * w, 1),
                    (2 * w, 2 * w, 2),
                    (2 * w, 4 * w, 1),
                    (4 * w, 4 * w, 2),
                    (4 * w, 8 * w, 1),
                ];
                for (c_in, c_out, stride) in plan {
                    stages.push(Stage::ConvRelu(ConvUnit::new(
                        c_in, c_out, 3, stride, 1, rng,
                    )));
                }
                // Final stage stays un-normalized and signed so the pooled
                // features keep per-input variance.
                stages.push(Stage::ConvRelu(ConvUnit::new_plain(
                    8 * w,
                    8 * w,
                    3,
                    2,
                    1,
                    rng,
                )));
            }
            EncoderKind::Residual => {
                stages.push(Stage::ConvRelu(ConvUnit::new(1, w, 3, 2, 1, rng)));
                let plan = [(w, w, 1), (w, 2 * w, 2), (2 * w, 4 * w, 2)];
                for (c_in, c_out, stride) in plan {
                    stages.push(Stage::Res(ResBlock::new(c_in, c_out, stride, rng)));
                }
                // The deepest stage is an un-normalized signed block so
                // pooled features keep per-input variance.
                stages.push(Stage::Res(ResBlock::new_plain(4 * w, 8 * w, 2, rng)));
            }
        }
        let embed = Linear::new(final_channels, spec.embedding_dim, rng);
        Ok(Encoder {
            spec: *spec,
            stages,
            embed,
        })
    }

    /// Runs the feature path; output is (N, embedding_dim).
    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, EncoderCache<F>) {
        let mut cur = x.clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, cache) = stage.forward(&cur);
            stage_caches.push(cache);
            cur = next;
        }
        let (_, _, h, w) = cur.dim();
        let pooled = global_avg_pool(&cur);
        let (feat, embed_cache) = self.embed.forward(&pooled);
        (
            feat,
            EncoderCache {
                stage_caches,
                pooled_hw: (h, w),
                embed_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderCache<F>, dfeat: &Array2<F>) {
        let dpooled = self.embed.backward(&cache.embed_cache, dfeat);
        let (h, w) = cache.pooled_hw;
        let mut dcur = global_avg_pool_backward(&dpooled, h, w);
        for (stage, sc) in self.stages.iter_mut().zip(cache.stage_caches.iter()).rev() {
            dcur = stage.backward(sc, &dcur);
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.stages {
            s.zero_grad();
        }
        self.embed.zero_grad();
    }

    /// The embedding layer is the deepest feature layer, so it shares the
    /// deepest stage's block; the final block holds only the task head.
    fn embed_block(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn param_slots(&self) -> Vec<ParamSlot<'_, F>> {
        let mut out = Vec::new();
        let embed_block = self.embed_block();
        for (i, s) in self.stages.iter().enumerate() {
            s.slots(&format!("enc.stage{i}"), i, &mut out);
        }
        self.embed.slots_into("enc.embed", embed_block, &mut out);
        out
    }

    pub fn param_slots_mut(&mut self) -> Vec<ParamSlotMut<'_, F>> {
        let mut out = Vec::new();
        let embed_block = self.embed_block();
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.slots_mut(&format!("enc.stage{i}"), i, &mut out);
        }
        self.embed
            .slots_mut_into("enc.embed", embed_block, &mut out);
        out
    }
}

/// Two-layer MLP projection head used only during contrastive training.
#[derive(Debug, Clone)]
pub struct ProjectionHead<F> {
    fc1: Linear<F>,
    fc2: Linear<F>,
}

pub struct ProjectionCache<F> {
    c1: LinearCache<F>,
    h: Array2<F>,
    c2: LinearCache<F>,
}

impl<F: Float> ProjectionHead<F> {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            fc1: Linear::new(dim, dim, rng),
            fc2: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, ProjectionCache<F>) {
        let (z1, c1) = self.fc1.forward(x);
        let h = relu2(&z1);
        let (z2, c2) = self.fc2.forward(&h);
        (z2, ProjectionCache { c1, h, c2 })
    }

    pub fn backward(&mut self, cache: &ProjectionCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dh = self.fc2.backward(&cache.c2, dy);
        let dz1 = relu_backward2(&cache.h, &dh);
        self.fc1.backward(&cache.c1, &dz1)
    }

    pub fn zero_grad(&mut self) {
        self.fc1.zero_grad();
        self.fc2.zero_grad();
    }
}

/// Encoder plus projection head; emits L2-normalized embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveModel<F> {
    pub encoder: Encoder<F>,
    pub proj: ProjectionHead<F>,
}

pub struct ContrastiveCache<F> {
    enc: EncoderCache<F>,
    proj: ProjectionCache<F>,
    norm: L2NormCache<F>,
}

impl<F: Float> ContrastiveModel<F> {
    pub fn build(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::build(spec, rng)?;
        let proj = ProjectionHead::new(spec.embedding_dim, rng);
        Ok(ContrastiveModel { encoder, proj })
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, ContrastiveCache<F>) {
        let (feat, enc) = self.encoder.forward(x);
        let (proj_out, proj) = self.proj.forward(&feat);
        let (normalized, norm) = l2_normalize_rows(&proj_out);
        (normalized, ContrastiveCache { enc, proj, norm })
    }

    /// Embeddings only, caches dropped; for the gradient-stopped key path.
    pub fn embed(&self, x: &Array4<F>) -> Array2<F> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &ContrastiveCache<F>, d_normalized: &Array2<F>) {
        let dproj = l2_normalize_backward(&cache.norm, d_normalized);
        let dfeat = self.proj.backward(&cache.proj, &dproj);
        self.encoder.backward(&cache.enc, &dfeat);
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.proj.zero_grad();
    }

    pub fn param_slots(&self) -> Vec<ParamSlot<'_, F>> {
        let mut out = self.encoder.param_slots();
        let head_block = self.encoder.spec.n_blocks() - 1;
        self.proj.fc1.slots_into("proj.fc1", head_block, &mut out);
        self.proj.fc2.slots_into("proj.fc2", head_block, &mut out);
        out
    }

    pub fn param_slots_mut(&mut self) -> Vec<ParamSlotMut<'_, F>> {
        let head_block = self.encoder.spec.n_blocks() - 1;
        let mut out = self.encoder.param_slots_mut();
        self.proj
            .fc1
            .slots_mut_into("proj.fc1", head_block, &mut out);
        self.proj
            .fc2
            .slots_mut_into("proj.fc2", head_block, &mut out);
        out
    }
}

/// Encoder plus a 2-class linear head; the fine-tuning/inference model.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub encoder: Encoder<F>,
    pub head: Linear<F>,
}

pub struct ClassifierCache<F> {
    enc: EncoderCache<F>,
    head: LinearCache<F>,
}

impl<F: Float> Classifier<F> {
    pub fn build(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::build(spec, rng)?;
        let head = Linear::new(spec.embedding_dim, 2, rng);
        Ok(Classifier { encoder, head })
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, ClassifierCache<F>) {
        let (feat, enc) = self.encoder.forward(x);
        let (logits, head) = self.head.forward(&feat);
        (logits, ClassifierCache { enc, head })
    }

    /// Logits without retained caches, for inference.
    pub fn logits(&self, x: &Array4<F>) -> Array2<F> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &ClassifierCache<F>, dlogits: &Array2<F>) {
        let dfeat = self.head.backward(&cache.head, dlogits);
        self.encoder.backward(&cache.enc, &dfeat);
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.head.zero_grad();
    }

    pub fn param_slots(&self) -> Vec<ParamSlot<'_, F>> {
        let mut out = self.encoder.param_slots();
        let head_block = self.encoder.spec.n_blocks() - 1;
        self.head.slots_into("head.fc", head_block, &mut out);
        out
    }

    pub fn param_slots_mut(&mut self) -> Vec<ParamSlotMut<'_, F>> {
        let head_block = self.encoder.spec.n_blocks() - 1;
        let mut out = self.encoder.param_slots_mut();
        self.head.slots_mut_into("head.fc", head_block, &mut out);
        out
    }
}

/// Ordered partition of trainable parameters into blocks, shallowest first.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BlockPartition {
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BlockInfo {
    pub index: usize,
    pub param_names: Vec<String>,
    pub n_params: usize,
}

/// Groups parameter slots by block index. Blocks are disjoint and jointly
/// exhaustive by construction; this is asserted in tests over real models.
pub fn block_partition<F: Float>(slots: &[ParamSlot<'_, F>], n_blocks: usize) -> BlockPartition {
    let mut blocks: Vec<BlockInfo> = (0..n_blocks)
        .map(|index| BlockInfo {
            index,
            param_names: Vec::new(),
            n_params: 0,
        })
        .collect();
    for s in slots {
        let b = &mut blocks[s.meta.block];
        b.param_names.push(s.meta.name.clone());
        b.n_params += s.param.len();
    }
    BlockPartition { blocks }
}

/// Converts [0, 1] grayscale patches into a centered (N, 1, H, W) batch.
pub fn to_input_tensor<F: Float>(patches: &[Array2<f32>]) -> Array4<F> {
    let n = patches.len();
    let (h, w) = patches[0].dim();
    let mut x = Array4::<F>::zeros((n, 1, h, w));
    for (i, p) in patches.iter().enumerate() {
        debug_assert_eq!(p.dim(), (h, w));
        for ((y, xx), &v) in p.indexed_iter() {
            x[[i, 0, y, xx]] = crate::nn::f::<F>((f64::from(v) - 0.5) * 2.0);
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Checkpoints: weights blob + JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: EncoderSpec,
    pub phase: String,
    pub epochs: usize,
    pub config_hash: String,
    pub metrics: serde_json::Value,
}

const WEIGHTS_MAGIC: &[u8; 8] = b"SIFTWTS1";

pub fn save_checkpoint<F: Float>(
    dir: impl AsRef<Path>,
    slots: &[ParamSlot<'_, F>],
    manifest: &CheckpointManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("weights.bin");
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    let werr = |e: std::io::Error| Error::io(&path, e);
    file.write_all(WEIGHTS_MAGIC).map_err(werr)?;
    file.write_all(&(slots.len() as u64).to_le_bytes())
        .map_err(werr)?;
    for s in slots {
        let name = s.meta.name.as_bytes();
        file.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(werr)?;
        file.write_all(name).map_err(werr)?;
        file.write_all(&(s.param.len() as u64).to_le_bytes())
            .map_err(werr)?;
        for &v in s.param {
            file.write_all(&(v.to_f32().unwrap()).to_le_bytes())
                .map_err(werr)?;
        }
    }
    file.flush().map_err(werr)?;

    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(manifest).unwrap(),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub weights: HashMap<String, Vec<f32>>,
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    let path = dir.join("weights.bin");
    let mut file =
        std::io::BufReader::new(std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?);
    let rerr = |e: std::io::Error| Error::io(&path, e);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(rerr)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Checkpoint("bad weights magic".into()));
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8).map_err(rerr)?;
    let count = u64::from_le_bytes(buf8);
    let mut weights = HashMap::new();
    for _ in 0..count {
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4).map_err(rerr)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name).map_err(rerr)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("bad weight name: {e}")))?;
        file.read_exact(&mut buf8).map_err(rerr)?;
        let len = u64::from_le_bytes(buf8) as usize;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            file.read_exact(&mut buf4).map_err(rerr)?;
            data.push(f32::from_le_bytes(buf4));
        }
        weights.insert(name, data);
    }
    Ok(LoadedCheckpoint { manifest, weights })
}

/// Outcome of applying checkpoint weights onto a model by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Present in the model but absent from the checkpoint (left at init).
    pub missing: Vec<String>,
    /// Present in the checkpoint but unused by the model.
    pub ignored: Vec<String>,
}

pub fn apply_weights<F: Float>(
    slots: Vec<ParamSlotMut<'_, F>>,
    weights: &HashMap<String, Vec<f32>>,
) -> Result<LoadReport> {
    let mut matched = Vec::new();
    let mut missing = Vec::new();
    let mut used: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for slot in slots {
        match weights.get(&slot.meta.name) {
            Some(data) => {
                if data.len() != slot.param.len() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {}: checkpoint {} vs model {}",
                        slot.meta.name,
                        data.len(),
                        slot.param.len()
                    )));
                }
                for (p, &v) in slot.param.iter_mut().zip(data.iter()) {
                    *p = crate::nn::f::<F>(f64::from(v));
                }
                used.insert(
                    weights
                        .get_key_value(&slot.meta.name)
                        .map(|(k, _)| k.as_str())
                        .unwrap(),
                );
                matched.push(slot.meta.name.clone());
            }
            None => missing.push(slot.meta.name.clone()),
        }
    }
    let mut ignored: Vec<String> = weights
        .keys()
        .filter(|k| !used.contains(k.as_str()))
        .cloned()
        .collect();
    ignored.sort();
    Ok(LoadReport {
        matched,
        missing,
        ignored,
    })
}
