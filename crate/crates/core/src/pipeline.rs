//! Frozen components shared by training, validation and inference.

use crate::codec::{LatentTensor, SpaceToDepth};
use crate::denoiser::{ConditioningMode, LoRAActivation};
use crate::error::Result;
use crate::featenc::{adapt, gram, gram_distance, FeatureMap, FrozenEncoder, GramNorm};
use crate::image::{bicubic_upscale, luminance_or_gray, psnr, ssim, ImageTensor, MetricReport};
use crate::losses::{perceptual_loss, gram_loss};
use crate::tensor::Matrix;
use crate::trainer::{Checkpoint, RunConfig};

/// An LQ input brought to HQ size, encoded, and described by the conditioning encoder.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub upsampled: ImageTensor,
    pub latent: LatentTensor,
    pub features: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codec: SpaceToDepth,
    pub cond_encoder: FrozenEncoder,
    pub gram_encoder: FrozenEncoder,
    pub gram_norm: GramNorm,
    pub scale: usize,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            codec: SpaceToDepth::new(cfg.codec_stride)?,
            cond_encoder: FrozenEncoder::new(cfg.encoders.conditioning.clone(), 3)?,
            gram_encoder: FrozenEncoder::new(cfg.encoders.gram.clone(), 3)?,
            gram_norm: cfg.gram_norm,
            scale: cfg.degradation.downscale_factor,
        })
    }

    pub fn prepare(&self, lq: &ImageTensor) -> Result<Prepared> {
        let rgb = if lq.channels() == 1 { lq.gray_to_rgb()? } else { lq.clone() };
        let upsampled = bicubic_upscale(&rgb, self.scale)?;
        let latent = self.codec.encode(&upsampled)?;
        let features = self.cond_encoder.extract(&upsampled)?;
        Ok(Prepared {
            upsampled,
            latent,
            features,
        })
    }

    /// Token block the checkpoint conditions on for these features.
    pub fn tokens(&self, ckpt: &Checkpoint, features: &FeatureMap) -> Result<Matrix> {
        match ckpt.denoiser.cond_mode {
            ConditioningMode::Visual => adapt(features, &ckpt.adapter),
            ConditioningMode::FixedTensor | ConditioningMode::LearnableTensor => {
                Ok(ckpt.denoiser.cond_tensor.clone())
            }
        }
    }

    /// `decode(z - eps)`, clipped into the image range.
    pub fn finish(&self, latent: &LatentTensor, eps: &Matrix) -> Result<ImageTensor> {
        let z = LatentTensor::new(latent.height(), latent.width(), latent.values().sub(eps)?)?;
        self.codec.decode(&z)
    }

    /// One-step restoration with a fixed set of active adapters.
    pub fn restore(&self, ckpt: &Checkpoint, lq: &ImageTensor, act: LoRAActivation) -> Result<ImageTensor> {
        let prep = self.prepare(lq)?;
        let tokens = self.tokens(ckpt, &prep.features)?;
        let eps = ckpt.denoiser.predict(&prep.latent, &tokens, act)?;
        self.finish(&prep.latent, eps.values())
    }

    /// PSNR and SSIM on luminance, plus Gram and perceptual distances.
    pub fn metrics(&self, sr: &ImageTensor, hq: &ImageTensor) -> Result<MetricReport> {
        let (ys, yh) = (luminance_or_gray(sr)?, luminance_or_gray(hq)?);
        let mut report = MetricReport {
            psnr: psnr(&ys, &yh)?,
            ssim: ssim(&ys, &yh)?,
            auxiliary: Default::default(),
        };
        report
            .auxiliary
            .insert("gram_distance".into(), gram_loss(sr, hq, &self.gram_encoder, self.gram_norm)?);
        report
            .auxiliary
            .insert("perceptual".into(), perceptual_loss(sr, hq, &self.cond_encoder)?);
        Ok(report)
    }

    /// Gram distance alone, for comparisons without a ground truth.
    pub fn gram_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let ga = gram(&self.gram_encoder.extract(a)?, self.gram_norm)?;
        let gb = gram(&self.gram_encoder.extract(b)?, self.gram_norm)?;
        gram_distance(&ga, &gb)
    }
}
