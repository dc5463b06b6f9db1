use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::DEFAULT_STRIDE;
use crate::degrade::DegradationConfig;
use crate::denoiser::{ConditioningMode, DenoiserArch, DEFAULT_RANK};
use crate::error::{config_err, Error, Result};
use crate::featenc::{EncoderSpec, GramNorm};
use crate::guidance::{GuidanceMode, GuidanceScales};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Folder of HQ images to crop training patches from; synthetic textures when absent.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    /// Patches taken from each image of a folder.
    pub patches_per_image: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            synthetic_train: 16,
            synthetic_val: 4,
            patches_per_image: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderPair {
    pub conditioning: EncoderSpec,
    pub gram: EncoderSpec,
}

impl Default for EncoderPair {
    fn default() -> Self {
        Self {
            conditioning: EncoderSpec::conditioning_default(),
            gram: EncoderSpec::gram_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub pretrain: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub stage3: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            pretrain: 1e-3,
            stage1: 5e-5,
            stage2: 5e-5,
            stage3: 5e-6,
        }
    }
}

impl LearningRates {
    pub fn for_stage(&self, stage: u8) -> f64 {
        match stage {
            0 => self.pretrain,
            1 => self.stage1,
            2 => self.stage2,
            _ => self.stage3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSteps {
    pub pretrain: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            stage1: 1000,
            stage2: 1000,
            stage3: 500,
        }
    }
}

impl StageSteps {
    pub fn for_stage(&self, stage: u8) -> usize {
        match stage {
            0 => self.pretrain,
            1 => self.stage1,
            2 => self.stage2,
            _ => self.stage3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    /// Validate every this many stage-3 steps.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            eval_every: 25,
            patience: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic corpus generation and patch cropping.
    pub data: u64,
    /// Base weights and adapter initialization.
    pub model: u64,
    /// Batch order, degradation draws, noise and timesteps.
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            model: 2,
            train: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// HQ training patch side in pixels.
    pub patch_size: usize,
    pub degradation: DegradationConfig,
    pub encoders: EncoderPair,
    pub codec_stride: usize,
    pub denoiser: DenoiserArch,
    pub cond_mode: ConditioningMode,
    pub lora_rank: usize,
    pub gram_norm: GramNorm,
    pub loss_weights: LossWeights,
    pub learning_rates: LearningRates,
    pub batch_size: usize,
    pub max_steps: StageSteps,
    /// Probability of replacing the conditioning with the null block during pretraining.
    pub cond_dropout: f64,
    pub early_stopping: EarlyStopping,
    pub guidance_mode: GuidanceMode,
    pub validation_scales: GuidanceScales,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            patch_size: 64,
            degradation: DegradationConfig::default(),
            encoders: EncoderPair::default(),
            codec_stride: DEFAULT_STRIDE,
            denoiser: DenoiserArch::default(),
            cond_mode: ConditioningMode::Visual,
            lora_rank: DEFAULT_RANK,
            gram_norm: GramNorm::GlobalFrobenius,
            loss_weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            batch_size: 16,
            max_steps: StageSteps::default(),
            cond_dropout: 0.1,
            early_stopping: EarlyStopping::default(),
            guidance_mode: GuidanceMode::Residual,
            validation_scales: GuidanceScales::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.degradation.validate()?;
        EncoderSpec::check_pair(&self.encoders.conditioning, &self.encoders.gram)?;
        self.denoiser.validate()?;
        self.loss_weights.validate()?;
        self.validation_scales.validate()?;
        let lr = self.learning_rates;
        for v in [lr.pretrain, lr.stage1, lr.stage2, lr.stage3] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err!("learning rates must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if self.lora_rank == 0 {
            return Err(config_err!("lora rank must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(config_err!("cond_dropout must lie in [0, 1]"));
        }
        if self.early_stopping.eval_every == 0 || self.early_stopping.patience == 0 {
            return Err(config_err!("early stopping interval and patience must be positive"));
        }
        let s = self.codec_stride;
        let p = self.patch_size;
        let f = self.degradation.downscale_factor;
        if s == 0 || p % s != 0 || p % f != 0 {
            return Err(config_err!(
                "patch size {p} must be divisible by codec stride {s} and downscale factor {f}"
            ));
        }
        let (lh, lw) = (p / s, p / s);
        if lh % 4 != 0 {
            return Err(config_err!("latent grid {lh}x{lw} must be divisible by 4"));
        }
        let c = 3 * s * s;
        if self.denoiser.latent_channels != c {
            return Err(config_err!(
                "denoiser latent_channels {} does not match 3 * stride^2 = {c}",
                self.denoiser.latent_channels
            ));
        }
        let ce = &self.encoders.conditioning;
        if p % ce.patch_size != 0 || p % self.encoders.gram.patch_size != 0 {
            return Err(config_err!("patch size {p} must be divisible by encoder patch sizes"));
        }
        let tokens = (p / ce.patch_size) * (p / ce.patch_size);
        if self.denoiser.cond_tokens != tokens || self.denoiser.cond_dim != ce.dim {
            return Err(config_err!(
                "denoiser expects {}x{} tokens but the conditioning encoder yields {tokens}x{}",
                self.denoiser.cond_tokens,
                self.denoiser.cond_dim,
                ce.dim
            ));
        }
        Ok(())
    }

    /// Fields that fix tensor shapes; a checkpoint can only continue under a
    /// config that agrees on all of them.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        if self.codec_stride != other.codec_stride {
            return Err(config_err!(
                "codec stride {} does not match checkpoint stride {}",
                self.codec_stride,
                other.codec_stride
            ));
        }
        if self.encoders != other.encoders
            || self.denoiser != other.denoiser
            || self.cond_mode != other.cond_mode
            || self.lora_rank != other.lora_rank
            || self.patch_size != other.patch_size
        {
            return Err(config_err!(
                "config architecture (encoders, denoiser, conditioning, rank, patch) differs from the checkpoint"
            ));
        }
        Ok(())
    }
}
