//! Frozen patch-feature encoders, the conditioning adapter and Gram statistics.
//!
//! Two encoders exist side by side: a wider one whose features condition the
//! denoiser, and a narrower one used only for Gram-matrix texture statistics.
//! Both are small pre-norm transformers with weights drawn once from their
//! seed and never updated.

mod adapter;
mod gram;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Matrix;

pub use adapter::{adapt, adapt_var, AdapterParams};
pub use gram::{gram, gram_distance, gram_distance_var, gram_var, GramMatrix, GramNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Conditioning,
    Gram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub role: EncoderRole,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub seed: u64,
    #[serde(default = "frozen_default")]
    pub frozen: bool,
}

fn frozen_default() -> bool {
    true
}

impl EncoderSpec {
    pub fn conditioning_default() -> Self {
        Self {
            role: EncoderRole::Conditioning,
            patch_size: 8,
            depth: 2,
            dim: 48,
            seed: 0xC0_4D,
            frozen: true,
        }
    }

    pub fn gram_default() -> Self {
        Self {
            role: EncoderRole::Gram,
            patch_size: 8,
            depth: 2,
            dim: 24,
            seed: 0x6_7A4,
            frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 {
            return Err(config_err!("encoder patch size and dim must be positive"));
        }
        if self.dim % 2 != 0 {
            return Err(config_err!("encoder dim must be even for 2-D positional encoding"));
        }
        if !self.frozen {
            return Err(config_err!("feature encoders are always frozen"));
        }
        Ok(())
    }

    /// The conditioning and Gram encoders must not share a seed or a width.
    pub fn check_pair(conditioning: &EncoderSpec, gram: &EncoderSpec) -> Result<()> {
        conditioning.validate()?;
        gram.validate()?;
        if conditioning.role != EncoderRole::Conditioning || gram.role != EncoderRole::Gram {
            return Err(config_err!("encoder roles are swapped"));
        }
        if conditioning.seed == gram.seed || conditioning.dim == gram.dim {
            return Err(config_err!(
                "conditioning and gram encoders need distinct seeds and dims"
            ));
        }
        Ok(())
    }
}

/// `N x d` patch features in raster order of the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.is_empty() {
            return Err(shape_err!("feature map must be non-empty"));
        }
        if !values.all_finite() {
            return Err(shape_err!("feature map must be finite"));
        }
        Ok(Self { values })
    }

    pub fn num_patches(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

/// A seeded-random, frozen vision transformer over non-overlapping patches.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    in_channels: usize,
    embed_w: Matrix,
    embed_b: Matrix,
    blocks: Vec<Block>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl FrozenEncoder {
    pub fn new(spec: EncoderSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.dim;
        let patch_len = spec.patch_size * spec.patch_size * in_channels;
        let embed_w = normal_matrix(&mut rng, patch_len, d, (1.0 / patch_len as f64).sqrt());
        let embed_b = normal_matrix(&mut rng, 1, d, 0.1);
        let attn_std = (1.0 / d as f64).sqrt();
        let blocks = (0..spec.depth)
            .map(|_| Block {
                wq: normal_matrix(&mut rng, d, d, attn_std),
                wk: normal_matrix(&mut rng, d, d, attn_std),
                wv: normal_matrix(&mut rng, d, d, attn_std),
                wo: normal_matrix(&mut rng, d, d, attn_std * 0.5),
                w1: normal_matrix(&mut rng, d, 2 * d, (2.0 / d as f64).sqrt()),
                b1: normal_matrix(&mut rng, 1, 2 * d, 0.1),
                w2: normal_matrix(&mut rng, 2 * d, d, (0.5 / d as f64).sqrt()),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            spec,
            in_channels,
            embed_w,
            embed_b,
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.spec.patch_size;
        if height % p != 0 || width % p != 0 || height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "{height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }

    pub fn num_patches(&self, height: usize, width: usize) -> Result<usize> {
        let (gh, gw) = self.grid(height, width)?;
        Ok(gh * gw)
    }

    pub fn extract(&self, x: &ImageTensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_matrix());
        let layers = self.forward_var(&mut tape, xv, x.height(), x.width())?;
        let last = *layers.last().expect("at least the embedding layer");
        FeatureMap::new(tape.value(last).clone())
    }

    /// Differentiable forward pass over a `[h*w, c]` image value. Returns the
    /// token matrix after the embedding and after every block; the last entry
    /// is the feature map.
    pub fn forward_var(&self, tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Vec<Var>> {
        let c = tape.shape(x).1;
        if c != self.in_channels || tape.shape(x).0 != h * w {
            return Err(shape_err!(
                "encoder expects a {h}x{w}x{} image, got {:?}",
                self.in_channels,
                tape.shape(x)
            ));
        }
        let (gh, gw) = self.grid(h, w)?;
        let p = self.spec.patch_size;
        let n = gh * gw;
        let patch_len = p * p * c;
        let index: std::sync::Arc<[usize]> = (0..n * patch_len)
            .map(|i| {
                let (tok, k) = (i / patch_len, i % patch_len);
                let (ty, tx) = (tok / gw, tok % gw);
                let (dy, rem) = (k / (p * c), k % (p * c));
                let (dx, ch) = (rem / c, rem % c);
                ((ty * p + dy) * w + tx * p + dx) * c + ch
            })
            .collect();
        let centre = tape.constant(Matrix::filled(1, c, -0.5));
        let xc = tape.add_row(x, centre);
        let xc = tape.scale(xc, 2.0);
        let patches = tape.gather(xc, index, n, patch_len);
        let ew = tape.constant(self.embed_w.clone());
        let eb = tape.constant(self.embed_b.clone());
        let tokens = tape.matmul(patches, ew);
        let tokens = tape.add_row(tokens, eb);
        let pos = tape.constant(positional_encoding(gh, gw, self.spec.dim));
        let mut h_var = tape.add(tokens, pos);
        let mut layers = vec![h_var];
        let inv_sqrt_d = 1.0 / (self.spec.dim as f64).sqrt();
        for b in &self.blocks {
            let normed = tape.layer_norm_rows(h_var);
            let wq = tape.constant(b.wq.clone());
            let wk = tape.constant(b.wk.clone());
            let wv = tape.constant(b.wv.clone());
            let wo = tape.constant(b.wo.clone());
            let q = tape.matmul(normed, wq);
            let k = tape.matmul(normed, wk);
            let v = tape.matmul(normed, wv);
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt);
            let logits = tape.scale(logits, inv_sqrt_d);
            let attn = tape.softmax_rows(logits);
            let ctx = tape.matmul(attn, v);
            let ctx = tape.matmul(ctx, wo);
            h_var = tape.add(h_var, ctx);

            let normed = tape.layer_norm_rows(h_var);
            let w1 = tape.constant(b.w1.clone());
            let b1 = tape.constant(b.b1.clone());
            let w2 = tape.constant(b.w2.clone());
            let b2 = tape.constant(b.b2.clone());
            let hidden = tape.matmul(normed, w1);
            let hidden = tape.add_row(hidden, b1);
            let hidden = tape.silu(hidden);
            let out = tape.matmul(hidden, w2);
            let out = tape.add_row(out, b2);
            h_var = tape.add(h_var, out);
            layers.push(h_var);
        }
        Ok(layers)
    }
}

/// Fixed 2-D sinusoidal encoding: the first half of the channels encodes the
/// patch row, the second half the patch column.
pub fn positional_encoding(gh: usize, gw: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_fn(gh * gw, dim, |tok, ch| {
        let (pos, k) = if ch < half {
            ((tok / gw) as f64, ch)
        } else {
            ((tok % gw) as f64, ch - half)
        };
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
        if k % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// One-shot feature extraction; builds the encoder from `spec` for a 3-channel input.
pub fn extract_features(x: &ImageTensor, spec: &EncoderSpec) -> Result<FeatureMap> {
    FrozenEncoder::new(spec.clone(), x.channels())?.extract(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec4() -> EncoderSpec {
        EncoderSpec {
            patch_size: 4,
            ..EncoderSpec::conditioning_default()
        }
    }

    fn img(salt: f64) -> ImageTensor {
        ImageTensor::from_fn(16, 16, 3, |y, x, c| {
            0.5 + 0.45 * ((y as f64 * 0.9 + salt).sin() * (x as f64 * 0.6 + c as f64).cos())
        })
        .unwrap()
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = extract_features(&img(0.0), &spec4()).unwrap();
        let b = extract_features(&img(0.0), &spec4()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_patches(), 16);
        assert_eq!(a.dim(), 48);
    }

    #[test]
    fn one_patch_change_moves_features() {
        let base = img(0.3);
        let mut data = base.data().to_vec();
        // perturb the top-left 4x4 patch only
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let i = (y * 16 + x) * 3 + c;
                    data[i] = 1.0 - data[i];
                }
            }
        }
        let other = ImageTensor::new(16, 16, 3, data).unwrap();
        let fa = extract_features(&base, &spec4()).unwrap();
        let fb = extract_features(&other, &spec4()).unwrap();
        for r in 0..16 {
            assert_ne!(fa.values().row(r), fb.values().row(r), "row {r}");
        }
    }

    #[test]
    fn indivisible_size() {
        let x = ImageTensor::filled(10, 16, 3, 0.5).unwrap();
        assert!(matches!(extract_features(&x, &spec4()), Err(Error::Size(_))));
    }

    #[test]
    fn default_pair_is_distinct() {
        EncoderSpec::check_pair(&EncoderSpec::conditioning_default(), &EncoderSpec::gram_default())
            .unwrap();
        let same = EncoderSpec {
            role: EncoderRole::Gram,
            ..EncoderSpec::conditioning_default()
        };
        assert!(EncoderSpec::check_pair(&EncoderSpec::conditioning_default(), &same).is_err());
    }
}
