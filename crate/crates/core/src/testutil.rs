//! Shared fixtures for unit tests.

use crate::denoiser::DenoiserArch;
use crate::trainer::{EarlyStopping, LearningRates, RunConfig, StageSteps};

/// 32x32 patches, a narrow denoiser and a handful of steps per stage.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        patch_size: 32,
        batch_size: 2,
        ..RunConfig::default()
    };
    cfg.denoiser = DenoiserArch {
        width: 8,
        bottleneck_width: 12,
        time_dim: 8,
        cond_tokens: 16,
        ..DenoiserArch::default()
    };
    cfg.data.synthetic_train = 4;
    cfg.data.synthetic_val = 2;
    cfg.max_steps = StageSteps {
        pretrain: 6,
        stage1: 3,
        stage2: 3,
        stage3: 4,
    };
    cfg.learning_rates = LearningRates {
        pretrain: 1e-2,
        stage1: 1e-3,
        stage2: 1e-3,
        stage3: 1e-3,
    };
    cfg.early_stopping = EarlyStopping {
        eval_every: 2,
        patience: 1,
    };
    cfg.validate().unwrap();
    cfg
}
