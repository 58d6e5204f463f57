//! Pretraining and finetuning loops, checkpoints, gradient checks and the
//! sweep and ablation harnesses.

mod checkpoint;
mod finetune;
pub mod gradcheck;
mod harness;
mod pretrain;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::objectives::LossWeights;
use crate::volumes::{AugmentationSpec, Dims3};

pub use checkpoint::{Checkpoint, CheckpointKind, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use finetune::{
    eval_patch, finetune, soft_dice_ce, split_labeled, FinetuneOutcome, FinetuneReport, SegmentationModel,
};
pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckReport, Suite};
pub use harness::{
    ablate, sweep, AblateConfig, AblationRow, Combination, SweepRow, ABLATION_COMBINATIONS,
};
pub use pretrain::{
    dataset_prefix_ids, pretrain, write_loss_csv, LossRow, PretrainModel, PretrainOutcome,
};

/// Serialize to JSON with keys in sorted order.
pub fn canonical_json<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    Ok(serde_json::to_string(&value)?)
}

/// Hex SHA-256 of [`canonical_json`].
pub fn config_hash<T: Serialize>(v: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(v)?.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Which pretraining signals are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermMask {
    /// Use full synthetic captions as text. When off, the text is only the
    /// dataset-name prefix.
    pub cap: bool,
    pub vlp: bool,
    pub vr: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask {
            cap: true,
            vlp: true,
            vr: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlpImageSource {
    View1,
    RawPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub terms: TermMask,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub patch_dims: Dims3,
    pub augmentation: AugmentationSpec,
    pub encoder: EncoderConfig,
    pub text_width: usize,
    pub text_seed: u64,
    pub projector_hidden: usize,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
    pub vlp_image: VlpImageSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 2000,
            seed: 0,
            lr: 1e-3,
            weight_decay: 5e-2,
            weights: LossWeights::default(),
            terms: TermMask::default(),
            checkpoint_interval: 500,
            patch_dims: Dims3::cube(32),
            augmentation: AugmentationSpec::default(),
            encoder: EncoderConfig::default(),
            text_width: 64,
            text_seed: 0,
            projector_hidden: 64,
            embed_dim: 32,
            vlp_image: VlpImageSource::View1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.terms;
        if !t.vlp && !t.vr {
            return Err(Error::config("at least one of the vlp and vr terms must be enabled"));
        }
        if t.cap && !t.vlp {
            return Err(Error::config("the cap term only acts through vlp; enable vlp or disable cap"));
        }
        if t.vr && self.batch_size < 2 {
            return Err(Error::config("vr needs batch_size >= 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr must be positive and weight_decay non-negative"));
        }
        if self.text_width == 0 || self.projector_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("text_width, projector_hidden and embed_dim must be positive"));
        }
        self.weights.validate()?;
        self.augmentation.validate()?;
        check_patch(self.patch_dims, &self.encoder)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn check_patch(d: Dims3, enc: &EncoderConfig) -> Result<()> {
    let m = 1usize << enc.channels.len();
    if d.as_array().iter().any(|&s| s == 0 || s % m != 0) {
        return Err(Error::dimension(format!(
            "patch dims {d} must be divisible by {m} for a {}-stage encoder",
            enc.channels.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub label_fraction: f64,
    /// Share of labeled volumes held out for evaluation.
    pub holdout_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patch_dims: Dims3,
    /// Used only when the encoder is randomly initialized.
    pub encoder: EncoderConfig,
    pub eval: EvalOptions,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            label_fraction: 0.1,
            holdout_fraction: 0.2,
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            patch_dims: Dims3::cube(32),
            encoder: EncoderConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(format!(
                "label_fraction {} must lie in (0, 1]",
                self.label_fraction
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(format!(
                "holdout_fraction {} must lie in (0, 1)",
                self.holdout_fraction
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("finetune needs batch_size >= 1, lr > 0, weight_decay >= 0"));
        }
        check_patch(self.patch_dims, &self.encoder)
    }
}
