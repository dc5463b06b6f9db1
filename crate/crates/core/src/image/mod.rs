//! Raster images in `[0, 1]`, colour conversion, resampling, patch cropping
//! and full-reference metrics.

mod io;
mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

pub use io::{decode_image, decode_png, decode_pnm, encode_png, encode_pnm, load_image, save_image};
pub use metrics::{psnr, ssim, MetricReport, PSNR_CAP_DB};

/// BT.601 full-range luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `height x width x channels` raster, interleaved, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary finite values, clipping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clipped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clipped(height, width, channels, data)
    }

    /// Reinterprets a `[h*w, c]` matrix as an image, clipping into `[0, 1]`.
    pub fn from_matrix(height: usize, width: usize, m: Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(shape_err!(
                "matrix with {} rows is not a {height}x{width} grid",
                m.rows()
            ));
        }
        let channels = m.cols();
        Self::from_clipped(height, width, channels, m.into_data())
    }

    fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(shape_err!("image dimensions must be positive, got {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images have 1 or 3 channels, got {channels}"));
        }
        Ok(())
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
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// The image as a `[h*w, c]` matrix (same memory order).
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.height * self.width, self.channels, self.data.clone())
            .expect("image buffer length is checked at construction")
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn gray_to_rgb(&self) -> Result<Self> {
        if self.channels != 1 {
            return Err(shape_err!("gray_to_rgb expects 1 channel, got {}", self.channels));
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self::new(self.height, self.width, 3, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Size(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Self::new(height, width, c, data)
    }

    /// Quantizes to 8 bits per sample.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

#[inline]
pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel Y plane of the BT.601 full-range YCbCr transform.
pub fn rgb_to_luminance(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels != 3 {
        return Err(shape_err!(
            "luminance conversion needs 3 channels, got {}",
            img.channels
        ));
    }
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (wr * p[0] + wg * p[1] + wb * p[2]).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(img.height, img.width, 1, data)
}

/// Luminance for RGB input, the image itself for grayscale.
pub fn luminance_or_gray(img: &ImageTensor) -> Result<ImageTensor> {
    match img.channels {
        1 => Ok(img.clone()),
        _ => rgb_to_luminance(img),
    }
}

/// `count` square patches at offsets drawn from a ChaCha8 stream seeded with
/// `seed`: for each patch, `top` then `left`, each uniform over the valid range.
pub fn crop_patches(
    img: &ImageTensor,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::Size(format!(
            "patch size {size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=img.height - size);
            let left = rng.random_range(0..=img.width - size);
            img.crop(top, left, size, size)
        })
        .collect()
}

/// Box-filter downscale by an integer factor.
pub fn area_downsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::Size(format!(
            "{}x{} is not divisible by {factor}",
            img.height, img.width
        )));
    }
    let (oh, ow, c) = (img.height / factor, img.width / factor, img.channels);
    let inv = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0; oh * ow * c];
    for y in 0..img.height {
        for x in 0..img.width {
            let dst = ((y / factor) * ow + x / factor) * c;
            for ch in 0..c {
                data[dst + ch] += img.get(y, x, ch);
            }
        }
    }
    for v in &mut data {
        *v *= inv;
    }
    ImageTensor::from_clipped(oh, ow, c, data)
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-sample source taps for a 1-D bicubic resize with half-pixel centres.
fn cubic_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let mut taps = [(0, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as isize - 1;
                let idx = (base as isize + offset).clamp(0, src as isize - 1) as usize;
                *tap = (idx, cubic_weight(frac - offset as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize to an arbitrary size, clamped borders, output clipped to `[0, 1]`.
pub fn bicubic_resize(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::Size("bicubic target must be non-empty".into()));
    }
    let c = img.channels;
    let xt = cubic_taps(img.width, width);
    let yt = cubic_taps(img.height, height);
    // horizontal pass
    let mut tmp = vec![0.0; img.height * width * c];
    for y in 0..img.height {
        for (x, taps) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sx, w) in taps {
                    acc += w * img.get(y, sx, ch);
                }
                tmp[(y * width + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; height * width * c];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sy, w) in taps {
                    acc += w * tmp[(sy * width + x) * c + ch];
                }
                out[(y * width + x) * c + ch] = acc;
            }
        }
    }
    ImageTensor::from_clipped(height, width, c, out)
}

pub fn bicubic_upscale(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    bicubic_resize(img, img.height * factor, img.width * factor)
}
