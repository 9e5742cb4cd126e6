//! Unified run configuration: one JSON tree covering every stage, validated
//! strictly (unknown keys are rejected), with an order-independent hash for
//! provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::models::{EncoderKind, EncoderSpec};
use crate::sampler::{AugmentParams, PairPolicy};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub short_side: usize,
    pub pad: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            short_side: 1024,
            pad: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_patches: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_patches: 20 }
    }
}

/// Merged configuration tree for all pipeline stages. The global `seed`
/// drives every stage; stage-level seeds are derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Caps loader/evaluator parallelism; `None` uses all cores.
    pub workers: Option<usize>,
    pub label_window: usize,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitRatios,
    pub policy: PairPolicy,
    pub augment: AugmentParams,
    pub encoder: EncoderSpec,
    pub contrastive: ContrastiveConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults mirroring the reference hyperparameters: 4000 pre-training
    /// epochs at batch 128, lr 1.5e-2, queue 4096, k = 9, patch 448,
    /// eta = 2.8, N = 20 evaluation patches.
    pub fn paper_preset() -> RunConfig {
        RunConfig {
            seed: 0,
            workers: None,
            label_window: 9,
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitRatios::default(),
            policy: PairPolicy::default(),
            augment: AugmentParams {
                out_height: 224,
                out_width: 224,
                ..AugmentParams::default()
            },
            encoder: EncoderSpec {
                kind: EncoderKind::Residual,
                input_height: 448,
                input_width: 448,
                embedding_dim: 128,
                base_width: 64,
            },
            contrastive: ContrastiveConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig { n_patches: 20 },
        }
    }

    /// Scaled-down preset that finishes on a laptop CPU in minutes.
    pub fn desk_preset() -> RunConfig {
        RunConfig {
            seed: 0,
            workers: None,
            label_window: 2,
            synth: SynthConfig {
                n_patients: 60,
                abnormal_fraction: 0.1,
                slices_per_volume: 24,
                slice_height: 128,
                slice_width: 128,
                lesion_intensity_boost: 0.4,
                lesion_radius_min: 9,
                lesion_radius_max: 16,
                lesion_z_extent: 5,
                seed: 0,
            },
            preprocess: PreprocessConfig {
                short_side: 96,
                pad: 8,
            },
            split: SplitRatios::default(),
            policy: PairPolicy {
                k: 4,
                ..PairPolicy::default()
            },
            augment: AugmentParams::default(),
            encoder: EncoderSpec {
                kind: EncoderKind::SmallCnn,
                input_height: 48,
                input_width: 48,
                embedding_dim: 128,
                base_width: 8,
            },
            contrastive: ContrastiveConfig {
                queue_size: 256,
                epochs: 30,
                batch_size: 32,
                base_lr: 1e-2,
                weight_decay: 1e-4,
                ..ContrastiveConfig::default()
            },
            finetune: FinetuneConfig {
                patch_size: 48,
                epochs: 15,
                batch_size: 32,
                abnormal_draws_per_epoch: 16.0,
                ..FinetuneConfig::default()
            },
            eval: EvalConfig { n_patches: 8 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.policy.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.finetune.validate()?;
        if self.preprocess.short_side == 0 {
            return Err(Error::Config("preprocess.short_side must be >= 1".into()));
        }
        if self.eval.n_patches == 0 {
            return Err(Error::Config("eval.n_patches must be >= 1".into()));
        }
        crate::dataset::SplitSpec::new(
            self.split.train,
            self.split.val,
            self.split.test,
            self.seed,
        )?;
        Ok(())
    }

    pub fn split_spec(&self) -> crate::dataset::SplitSpec {
        crate::dataset::SplitSpec {
            ratios: (self.split.train, self.split.val, self.split.test),
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON form; independent of key
    /// order in the source file.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads and validates a config file; unknown keys fail with the key name.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}
