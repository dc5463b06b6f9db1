//! Frozen latent codec: a lossless space-to-depth rearrangement.
//!
//! Each `s x s x C` pixel block becomes one latent cell with `C * s^2`
//! channels ordered `(dy, dx, c)`. Encoding and decoding are pure index
//! permutations, so `decode(encode(x)) == x` bit for bit and the codec is
//! exactly linear.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Matrix;

pub const DEFAULT_STRIDE: usize = 4;

/// `height x width` grid of latent cells, stored as a `[h*w, channels]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    height: usize,
    width: usize,
    values: Matrix,
}

impl LatentTensor {
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self> {
        if values.rows() != height * width || height == 0 || width == 0 {
            return Err(shape_err!(
                "{}x{} values do not form a {height}x{width} latent grid",
                values.rows(),
                values.cols()
            ));
        }
        if !values.all_finite() {
            return Err(shape_err!("latent values must be finite"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.values.cols())
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("latent {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentTensor) -> Result<LatentTensor> {
        self.check_same_shape(other)?;
        LatentTensor::new(self.height, self.width, self.values.sub(&other.values)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceToDepth {
    pub stride: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
        }
    }
}

impl SpaceToDepth {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("codec stride must be positive".into()));
        }
        Ok(Self { stride })
    }

    pub fn latent_shape(&self, height: usize, width: usize, channels: usize) -> Result<(usize, usize, usize)> {
        let s = self.stride;
        if height % s != 0 || width % s != 0 {
            return Err(Error::Size(format!(
                "{height}x{width} is not divisible by codec stride {s}"
            )));
        }
        Ok((height / s, width / s, channels * s * s))
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let (lh, lw, lc) = self.latent_shape(x.height(), x.width(), x.channels())?;
        let index = encode_index(x.height(), x.width(), x.channels(), self.stride);
        let src = x.data();
        let data = index.iter().map(|&i| src[i]).collect();
        LatentTensor::new(lh, lw, Matrix::from_vec(lh * lw, lc, data)?)
    }

    /// Inverse rearrangement without clipping, as a `[H*W, C]` matrix.
    pub fn decode_values(&self, z: &LatentTensor) -> Result<(usize, usize, Matrix)> {
        let s2 = self.stride * self.stride;
        if z.channels() % s2 != 0 {
            return Err(shape_err!(
                "{} latent channels are not divisible by stride^2 = {s2}",
                z.channels()
            ));
        }
        let (h, w, c) = (z.height() * self.stride, z.width() * self.stride, z.channels() / s2);
        let index = decode_index(h, w, c, self.stride);
        let src = z.values().data();
        let data = index.iter().map(|&i| src[i]).collect();
        Ok((h, w, Matrix::from_vec(h * w, c, data)?))
    }

    /// Inverse rearrangement, clipped into `[0, 1]` at the image boundary.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let (h, w, m) = self.decode_values(z)?;
        ImageTensor::from_matrix(h, w, m)
    }

    /// Differentiable encode of a `[h*w, c]` tape value.
    pub fn encode_var(&self, tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = tape.shape(x).1;
        let (lh, lw, lc) = self.latent_shape(h, w, c)?;
        let index = encode_index(h, w, c, self.stride);
        Ok(tape.gather(x, index, lh * lw, lc))
    }

    /// Differentiable, unclipped decode of a `[lh*lw, C*s^2]` tape value.
    pub fn decode_var(&self, tape: &mut Tape, z: Var, lh: usize, lw: usize) -> Result<Var> {
        let s = self.stride;
        let lc = tape.shape(z).1;
        if lc % (s * s) != 0 || tape.shape(z).0 != lh * lw {
            return Err(shape_err!("latent var {:?} is not a {lh}x{lw} grid", tape.shape(z)));
        }
        let (h, w, c) = (lh * s, lw * s, lc / (s * s));
        let index = decode_index(h, w, c, s);
        Ok(tape.gather(z, index, h * w, c))
    }
}

/// For each latent element in output order, the flat source index in the image.
fn encode_index(h: usize, w: usize, c: usize, s: usize) -> Arc<[usize]> {
    let (lh, lw) = (h / s, w / s);
    let mut index = Vec::with_capacity(h * w * c);
    for ly in 0..lh {
        for lx in 0..lw {
            for dy in 0..s {
                for dx in 0..s {
                    for ch in 0..c {
                        index.push(((ly * s + dy) * w + lx * s + dx) * c + ch);
                    }
                }
            }
        }
    }
    index.into()
}

/// For each image element in output order, the flat source index in the latent.
fn decode_index(h: usize, w: usize, c: usize, s: usize) -> Arc<[usize]> {
    let lw = w / s;
    let lc = c * s * s;
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let cell = (y / s) * lw + x / s;
                let k = ((y % s) * s + x % s) * c + ch;
                index.push(cell * lc + k);
            }
        }
    }
    index.into()
}
