//! Synthetic LQ/HQ pair generation: blur, downscale, noise, block compression.
//!
//! A single ordered pass. Parameters for each stage are drawn uniformly from
//! the configured ranges by a ChaCha8 stream seeded per call, in the order
//! blur sigma, noise sigma, quality, then the per-sample noise values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::image::{area_downsample, ImageTensor};

pub const MAX_NOISE_SIGMA: f64 = 0.2;
pub const QUALITY_MIN: u32 = 10;
/// The top of the quality scale is lossless in this surrogate.
pub const QUALITY_MAX: u32 = 95;
/// AC quantization step at the lowest quality.
const MAX_QUANT_STEP: f64 = 0.25;
const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationStage {
    Blur,
    Resize,
    Noise,
    Compression,
}

pub const STAGE_ORDER: [DegradationStage; 4] = [
    DegradationStage::Blur,
    DegradationStage::Resize,
    DegradationStage::Noise,
    DegradationStage::Compression,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub blur_sigma_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub downscale_factor: usize,
    pub compression_quality_range: (u32, u32),
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: (0.2, 1.5),
            noise_sigma_range: (0.0, 0.05),
            downscale_factor: 4,
            compression_quality_range: (40, 95),
        }
    }
}

impl DegradationConfig {
    /// Blur off, noise off, lossless compression: reduces to area downsampling.
    pub fn identity(downscale_factor: usize) -> Self {
        Self {
            blur_sigma_range: (0.0, 0.0),
            noise_sigma_range: (0.0, 0.0),
            downscale_factor,
            compression_quality_range: (QUALITY_MAX, QUALITY_MAX),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (blo, bhi) = self.blur_sigma_range;
        if !(blo.is_finite() && bhi.is_finite() && 0.0 <= blo && blo <= bhi) {
            return Err(config_err!("blur sigma range {blo}..{bhi} is invalid"));
        }
        let (nlo, nhi) = self.noise_sigma_range;
        if !(0.0 <= nlo && nlo <= nhi && nhi <= MAX_NOISE_SIGMA) {
            return Err(config_err!(
                "noise sigma range {nlo}..{nhi} must lie in [0, {MAX_NOISE_SIGMA}]"
            ));
        }
        let (qlo, qhi) = self.compression_quality_range;
        if !(QUALITY_MIN <= qlo && qlo <= qhi && qhi <= QUALITY_MAX) {
            return Err(config_err!(
                "quality range {qlo}..{qhi} must lie in [{QUALITY_MIN}, {QUALITY_MAX}]"
            ));
        }
        if self.downscale_factor < 2 {
            return Err(config_err!(
                "downscale factor must be at least 2, got {}",
                self.downscale_factor
            ));
        }
        Ok(())
    }
}

/// Parameters drawn for one degradation call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quality: u32,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}

pub fn degrade(hq: &ImageTensor, cfg: &DegradationConfig, seed: u64) -> Result<ImageTensor> {
    cfg.validate()?;
    let f = cfg.downscale_factor;
    if hq.height() % f != 0 || hq.width() % f != 0 {
        return Err(Error::Size(format!(
            "{}x{} is not divisible by the downscale factor {f}",
            hq.height(),
            hq.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DrawnParams {
        blur_sigma: uniform(&mut rng, cfg.blur_sigma_range),
        noise_sigma: uniform(&mut rng, cfg.noise_sigma_range),
        quality: rng.random_range(cfg.compression_quality_range.0..=cfg.compression_quality_range.1),
    };
    let mut img = hq.clone();
    for stage in STAGE_ORDER {
        img = match stage {
            DegradationStage::Blur => gaussian_blur(&img, params.blur_sigma)?,
            DegradationStage::Resize => area_downsample(&img, f)?,
            DegradationStage::Noise => add_noise(&img, params.noise_sigma, &mut rng)?,
            DegradationStage::Compression => block_compress(&img, params.quality)?,
        };
    }
    Ok(img)
}

pub fn make_pair(
    hq: &ImageTensor,
    cfg: &DegradationConfig,
    seed: u64,
) -> Result<(ImageTensor, ImageTensor)> {
    Ok((degrade(hq, cfg, seed)?, hq.clone()))
}

/// Separable Gaussian blur with clamped borders; `sigma == 0` is the identity.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let (h, w, c) = img.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - radius, w);
                    acc += kv * img.get(y, sx, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - radius, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    ImageTensor::from_clipped(h, w, c, out)
}

/// Additive Gaussian noise. One normal sample is drawn per value even when
/// `sigma == 0`, so the stream stays aligned across noise levels.
fn add_noise(img: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect();
    ImageTensor::from_clipped(h, w, c, data)
}

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut d = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in d.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    d
}

/// Quantization step for AC coefficient `(u, v)` at `quality`; zero means lossless.
pub fn quant_step(quality: u32, u: usize, v: usize) -> f64 {
    let q = quality.clamp(QUALITY_MIN, QUALITY_MAX);
    let base = MAX_QUANT_STEP * f64::from(QUALITY_MAX - q) / f64::from(QUALITY_MAX - QUALITY_MIN);
    base * (1.0 + 0.5 * (u + v) as f64)
}

/// Orthonormal 8x8 block DCT per channel with uniform quantization of the AC
/// coefficients. DC passes through untouched so flat regions keep their value.
pub fn block_compress(img: &ImageTensor, quality: u32) -> Result<ImageTensor> {
    if quality >= QUALITY_MAX {
        return Ok(img.clone());
    }
    let (h, w, c) = img.shape();
    let d = dct_basis();
    let bh = h.div_ceil(BLOCK);
    let bw = w.div_ceil(BLOCK);
    let mut out = img.data().to_vec();
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for ch in 0..c {
        for by in 0..bh {
            for bx in 0..bw {
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = (by * BLOCK + i).min(h - 1);
                        let x = (bx * BLOCK + j).min(w - 1);
                        *v = img.get(y, x, ch);
                    }
                }
                // coeff = D * B * D^T
                for u in 0..BLOCK {
                    for j in 0..BLOCK {
                        tmp[u][j] = (0..BLOCK).map(|i| d[u][i] * block[i][j]).sum();
                    }
                }
                let mut coeff = [[0.0; BLOCK]; BLOCK];
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let value: f64 = (0..BLOCK).map(|j| tmp[u][j] * d[v][j]).sum();
                        coeff[u][v] = if u == 0 && v == 0 {
                            value
                        } else {
                            let step = quant_step(quality, u, v);
                            (value / step).round() * step
                        };
                    }
                }
                // block = D^T * coeff * D
                for i in 0..BLOCK {
                    for v in 0..BLOCK {
                        tmp[i][v] = (0..BLOCK).map(|u| d[u][i] * coeff[u][v]).sum();
                    }
                }
                for i in 0..BLOCK {
                    let y = by * BLOCK + i;
                    if y >= h {
                        break;
                    }
                    for j in 0..BLOCK {
                        let x = bx * BLOCK + j;
                        if x >= w {
                            break;
                        }
                        out[(y * w + x) * c + ch] =
                            (0..BLOCK).map(|v| tmp[i][v] * d[v][j]).sum();
                    }
                }
            }
        }
    }
    ImageTensor::from_clipped(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{bicubic_upscale, psnr};

    fn texture(n: usize) -> ImageTensor {
        ImageTensor::from_fn(n, n, 3, |y, x, c| {
            0.5 + 0.4 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.45).cos())
        })
        .unwrap()
    }

    #[test]
    fn identity_config_is_area_downsampling() {
        let hq = texture(64);
        let lq = degrade(&hq, &DegradationConfig::identity(4), 3).unwrap();
        assert_eq!(lq, area_downsample(&hq, 4).unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let hq = texture(64);
        let cfg = DegradationConfig::default();
        let a = degrade(&hq, &cfg, 42).unwrap();
        let b = degrade(&hq, &cfg, 42).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, degrade(&hq, &cfg, 43).unwrap());
    }

    #[test]
    fn constants_survive_without_noise() {
        let hq = ImageTensor::filled(64, 64, 3, 0.63).unwrap();
        let cfg = DegradationConfig {
            blur_sigma_range: (0.5, 2.5),
            noise_sigma_range: (0.0, 0.0),
            downscale_factor: 4,
            compression_quality_range: (10, 60),
        };
        for seed in 0..5 {
            let lq = degrade(&hq, &cfg, seed).unwrap();
            assert_eq!(lq.shape(), (16, 16, 3));
            assert!(lq.data().iter().all(|v| (v - 0.63).abs() < 1e-6));
        }
    }

    #[test]
    fn pair_shapes() {
        let hq = texture(64);
        let (lq, back) = make_pair(&hq, &DegradationConfig::default(), 1).unwrap();
        assert_eq!(lq.shape(), (16, 16, 3));
        assert_eq!(back, hq);
    }

    #[test]
    fn indivisible_is_size_error() {
        let hq = texture(30);
        assert!(matches!(
            degrade(&hq, &DegradationConfig::default(), 0),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = DegradationConfig::default();
        cfg.noise_sigma_range = (0.0, 0.3);
        assert!(cfg.validate().is_err());
        let mut cfg = DegradationConfig::default();
        cfg.compression_quality_range = (5, 50);
        assert!(cfg.validate().is_err());
        let mut cfg = DegradationConfig::default();
        cfg.blur_sigma_range = (1.0, 0.5);
        assert!(cfg.validate().is_err());
        let mut cfg = DegradationConfig::default();
        cfg.downscale_factor = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn compression_produces_blocking_on_detail() {
        let img = texture(16);
        let c = block_compress(&img, 10).unwrap();
        assert!(psnr(&img, &c).unwrap() < 60.0);
        assert_eq!(block_compress(&img, QUALITY_MAX).unwrap(), img);
    }

    #[test]
    fn more_noise_never_helps_on_average() {
        let hq = texture(64);
        let mean_psnr = |hi: f64| {
            let cfg = DegradationConfig {
                noise_sigma_range: (0.0, hi),
                ..DegradationConfig::default()
            };
            (0..32)
                .map(|seed| {
                    let lq = degrade(&hq, &cfg, seed).unwrap();
                    psnr(&bicubic_upscale(&lq, 4).unwrap(), &hq).unwrap()
                })
                .sum::<f64>()
                / 32.0
        };
        let levels = [0.0, 0.02, 0.05, 0.1, 0.2];
        let scores: Vec<f64> = levels.iter().map(|&l| mean_psnr(l)).collect();
        for w in scores.windows(2) {
            assert!(w[1] <= w[0], "{scores:?}");
        }
    }
}
