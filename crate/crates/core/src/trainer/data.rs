//! Training and validation data: procedural textures or image folders,
//! degraded on the fly into LQ/HQ pairs.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::RunConfig;
use crate::degrade::{degrade, gaussian_blur};
use crate::error::{Error, Result};
use crate::image::{crop_patches, load_image, ImageTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub lq: ImageTensor,
    pub hq: ImageTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Sinusoids,
    Voronoi,
    FilteredNoise,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [
        TextureKind::Sinusoids,
        TextureKind::Voronoi,
        TextureKind::FilteredNoise,
    ];
}

fn stretch(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in values.iter_mut() {
        *v = 0.05 + 0.9 * (*v - lo) / span;
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Mixture of oriented sinusoids at several scales, each with its own color.
fn sinusoids(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(3..6))
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let period = rng.random_range(3.0..24.0);
            let phase = rng.random_range(0.0..TAU);
            let k = TAU / period;
            (k * angle.cos(), k * angle.sin(), phase, random_color(rng))
        })
        .collect();
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for (kx, ky, phase, color) in &waves {
                let s = (kx * x as f64 + ky * y as f64 + phase).sin();
                for c in 0..3 {
                    data[(y * size + x) * 3 + c] += s * color[c];
                }
            }
        }
    }
    stretch(&mut data);
    data
}

/// Colored Voronoi cells with darkened borders.
fn voronoi(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells: Vec<(f64, f64, [f64; 3])> = (0..rng.random_range(8..24))
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                random_color(rng),
            )
        })
        .collect();
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (mut d1, mut d2, mut best) = (f64::INFINITY, f64::INFINITY, 0);
            for (i, (cx, cy, _)) in cells.iter().enumerate() {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    best = i;
                } else if d < d2 {
                    d2 = d;
                }
            }
            let edge = ((d2 - d1) / 2.0).min(1.0);
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = cells[best].2[c] * (0.4 + 0.6 * edge);
            }
        }
    }
    stretch(&mut data);
    data
}

/// Two octaves of blurred white noise, tinted.
fn filtered_noise(size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let tint = random_color(rng);
    let mut acc = vec![0.0; size * size * 3];
    for (sigma, weight) in [(rng.random_range(2.0..5.0), 1.0), (rng.random_range(0.6..1.2), 0.5)] {
        let noise: Vec<f64> = (0..size * size)
            .map(|_| (0.5 + 0.15 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect();
        let plane = ImageTensor::new(size, size, 1, noise)?;
        let blurred = gaussian_blur(&plane, sigma)?;
        for (i, v) in blurred.data().iter().enumerate() {
            for c in 0..3 {
                acc[i * 3 + c] += weight * v * (0.3 + 0.7 * tint[c]);
            }
        }
    }
    stretch(&mut acc);
    Ok(acc)
}

pub fn texture_image(kind: TextureKind, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let data = match kind {
        TextureKind::Sinusoids => sinusoids(size, rng),
        TextureKind::Voronoi => voronoi(size, rng),
        TextureKind::FilteredNoise => filtered_noise(size, rng)?,
    };
    ImageTensor::new(size, size, 3, data)
}

/// `count` textures cycling through the three kinds.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| texture_image(TextureKind::ALL[i % 3], size, &mut rng))
        .collect()
}

fn folder_patches(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let img = load_image(p)?;
        let img = if img.channels() == 1 { img.gray_to_rgb()? } else { img };
        out.extend(crop_patches(
            &img,
            cfg.patch_size,
            cfg.data.patches_per_image,
            seed.wrapping_add(i as u64),
        )?);
    }
    Ok(out)
}

/// HQ training images and fixed validation pairs for a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageTensor>,
    pub val: Vec<Pair>,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let seed = cfg.seeds.data;
        let train = match &cfg.data.train_dir {
            Some(dir) => folder_patches(dir, cfg, seed)?,
            None => synthetic_corpus(cfg.data.synthetic_train, cfg.patch_size, seed)?,
        };
        let val_hq = match &cfg.data.val_dir {
            Some(dir) => folder_patches(dir, cfg, seed ^ 0x5A17)?,
            None => synthetic_corpus(cfg.data.synthetic_val, cfg.patch_size, seed ^ 0x5A17)?,
        };
        if train.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        if val_hq.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let val = val_hq
            .into_iter()
            .enumerate()
            .map(|(i, hq)| {
                let lq = degrade(&hq, &cfg.degradation, seed ^ (0xDE6 + i as u64))?;
                Ok(Pair { lq, hq })
            })
            .collect::<Result<_>>()?;
        Ok(Self { train, val })
    }
}
