//! Library for slice- and volume-level classification of extremely imbalanced
//! volumetric grayscale image datasets.
//!
//! The pipeline has three stages:
//!
//! 1. **Contrastive pre-training** of an encoder with a momentum (EMA) copy
//!    and a FIFO memory queue of negative keys, using metadata-aware positive
//!    pairs: augmented views of the same slice, neighboring slices of the same
//!    volume, and the other view of the same breast side.
//! 2. **Local multi-patch fine-tuning** of a two-class classifier on sampled
//!    sub-patches, with tumor-containment constraints on abnormal training
//!    patches, balanced batches, and optional per-block discriminative
//!    learning rates.
//! 3. **Slice-to-volume aggregation**: each slice is scored as the mean
//!    abnormal probability over `N` random patches, a volume is scored as the
//!    max over its slices, and the operating threshold minimizes the gap
//!    between normal and abnormal recall.
//!
//! Everything is verifiable end to end on procedurally generated synthetic
//! studies (see [`synth`]); no clinical data is required.

pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod sampler;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG from a base seed and a list of context tags
/// (worker id, epoch, step, ...). Streams with different tags are
/// statistically independent, and the derivation is stable across platforms,
/// which keeps parallel and serial execution bit-identical.
pub fn derived_rng(base_seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    <ChaCha8Rng as rand::SeedableRng>::from_seed(seed)
}
