//! Guided one-step inference: four forward passes with growing adapter
//! prefixes, combined with independent scales for the pixel, semantic and
//! texture contributions.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::denoiser::LoRAActivation;
use crate::error::{config_err, Error, Result};
use crate::image::{ImageTensor, MetricReport};
use crate::pipeline::Pipeline;
use crate::tensor::Matrix;
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceScales {
    pub lambda_pix: f64,
    pub lambda_sem: f64,
    pub lambda_gram: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

impl GuidanceScales {
    pub const fn new(lambda_pix: f64, lambda_sem: f64, lambda_gram: f64) -> Self {
        Self {
            lambda_pix,
            lambda_sem,
            lambda_gram,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_pix, self.lambda_sem, self.lambda_gram]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(config_err!("guidance scales must be finite: {self:?}"))
        }
    }

    /// The texture-scale grid {0.25, 0.5, 0.75, 1.0} with the other two scales at 1.
    pub fn texture_grid() -> Vec<GuidanceScales> {
        [0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|g| GuidanceScales::new(1.0, 1.0, g))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// The pixel delta is taken as the pixel pass itself and added to the base pass.
    Literal,
    /// The pixel delta is measured from the base pass, so unit scales give the full model.
    #[default]
    Residual,
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GuidanceMode::Literal),
            "residual" => Ok(GuidanceMode::Residual),
            other => Err(config_err!("unknown guidance mode {other:?}")),
        }
    }
}

/// Outputs of the four prefix passes: none, pix, pix+sem, all three.
#[derive(Debug, Clone, PartialEq)]
pub struct Passes {
    pub eps: [Matrix; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deltas {
    pub pix: Matrix,
    pub sem: Matrix,
    pub gram: Matrix,
}

impl Deltas {
    pub fn as_array(&self) -> [&Matrix; 3] {
        [&self.pix, &self.sem, &self.gram]
    }
}

fn require_stage3(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.stage != 3 {
        return Err(config_err!(
            "guided inference needs a stage-3 checkpoint, got stage {}",
            ckpt.stage
        ));
    }
    Ok(())
}

/// Runs the four forward passes. Requires a stage-3 checkpoint.
pub fn compute_passes(z: &LatentTensor, cond: &Matrix, ckpt: &Checkpoint) -> Result<Passes> {
    require_stage3(ckpt)?;
    let pass = |k| -> Result<Matrix> {
        Ok(ckpt
            .denoiser
            .predict(z, cond, LoRAActivation::prefix(k))?
            .into_values())
    };
    Ok(Passes {
        eps: [pass(0)?, pass(1)?, pass(2)?, pass(3)?],
    })
}

impl Passes {
    pub fn deltas(&self, mode: GuidanceMode) -> Result<Deltas> {
        let [e0, ep, es, eg] = &self.eps;
        Ok(Deltas {
            pix: match mode {
                GuidanceMode::Literal => ep.clone(),
                GuidanceMode::Residual => ep.sub(e0)?,
            },
            sem: es.sub(ep)?,
            gram: eg.sub(es)?,
        })
    }

    /// Combined epsilon `base + sum(lambda_i * delta_i)`.
    ///
    /// When the leading `k` scales are exactly 1 their deltas telescope to the
    /// `k`-th pass, which is used directly so unit scales reproduce that pass
    /// bit for bit. Zero scales contribute nothing.
    pub fn compose(&self, scales: &GuidanceScales, mode: GuidanceMode) -> Result<Matrix> {
        scales.validate()?;
        let lambdas = scales.as_array();
        let k = lambdas.iter().take_while(|&&l| l == 1.0).count();
        let [e0, ..] = &self.eps;
        let mut eps = match (mode, k) {
            (_, 0) => e0.clone(),
            (GuidanceMode::Residual, k) => self.eps[k].clone(),
            (GuidanceMode::Literal, k) => e0.add(&self.eps[k])?,
        };
        let deltas = self.deltas(mode)?;
        for (i, delta) in deltas.as_array().into_iter().enumerate().skip(k) {
            if lambdas[i] != 0.0 {
                eps.add_assign(&delta.scale(lambdas[i]));
            }
        }
        Ok(eps)
    }
}

pub fn compute_deltas(
    z: &LatentTensor,
    cond: &Matrix,
    ckpt: &Checkpoint,
    mode: GuidanceMode,
) -> Result<Deltas> {
    compute_passes(z, cond, ckpt)?.deltas(mode)
}

pub fn infer(
    pipeline: &Pipeline,
    lq: &ImageTensor,
    scales: &GuidanceScales,
    mode: GuidanceMode,
    ckpt: &Checkpoint,
) -> Result<ImageTensor> {
    require_stage3(ckpt)?;
    scales.validate()?;
    let prep = pipeline.prepare(lq)?;
    let tokens = pipeline.tokens(ckpt, &prep.features)?;
    let passes = compute_passes(&prep.latent, &tokens, ckpt)?;
    pipeline.finish(&prep.latent, &passes.compose(scales, mode)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scales: GuidanceScales,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Against the ground truth when given, otherwise against the upsampled input.
    pub gram_distance: f64,
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "lambda_pix,lambda_sem,lambda_gram,psnr,ssim,gram_distance,perceptual";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = r.scales;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.lambda_pix,
                s.lambda_sem,
                s.lambda_gram,
                cell(r.psnr),
                cell(r.ssim),
                r.gram_distance,
                cell(r.perceptual)
            )
            .expect("writing to a String");
        }
        out
    }
}

pub fn sweep(
    pipeline: &Pipeline,
    lq: &ImageTensor,
    grid: &[GuidanceScales],
    mode: GuidanceMode,
    ckpt: &Checkpoint,
    gt: Option<&ImageTensor>,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(config_err!("sweep grid is empty"));
    }
    require_stage3(ckpt)?;
    let prep = pipeline.prepare(lq)?;
    let tokens = pipeline.tokens(ckpt, &prep.features)?;
    let passes = compute_passes(&prep.latent, &tokens, ckpt)?;
    let mut rows = Vec::with_capacity(grid.len());
    for scales in grid {
        let sr = pipeline.finish(&prep.latent, &passes.compose(scales, mode)?)?;
        rows.push(match gt {
            Some(gt) => {
                let report: MetricReport = pipeline.metrics(&sr, gt)?;
                SweepRow {
                    scales: *scales,
                    psnr: Some(report.psnr),
                    ssim: Some(report.ssim),
                    gram_distance: report.aux("gram_distance").unwrap_or_default(),
                    perceptual: report.aux("perceptual"),
                }
            }
            None => SweepRow {
                scales: *scales,
                psnr: None,
                ssim: None,
                gram_distance: pipeline.gram_distance(&sr, &prep.upsampled)?,
                perceptual: None,
            },
        });
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests;
