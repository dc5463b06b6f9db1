//! 8-bit PNG and binary PNM (P5/P6) readers and writers.

use std::io::Cursor;
use std::path::Path;

use super::{to_byte, ImageTensor};
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
/// Decoders refuse anything larger; keeps hostile headers from driving huge allocations.
const MAX_PIXELS: usize = 1 << 26;

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Writes PNG or PNM depending on the extension (`.png`, `.ppm`, `.pgm`, `.pnm`).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("ppm" | "pgm" | "pnm") => encode_pnm(img),
        other => {
            return Err(Error::Format(format!(
                "cannot infer an image format from extension {other:?}"
            )))
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sniffs the magic bytes and decodes PNG or binary PNM.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::Format("neither PNG nor binary PNM".into()))
    }
}

struct PnmHeader<'a> {
    rest: &'a [u8],
}

impl<'a> PnmHeader<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.rest.first() {
                Some(b) if b.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self
                        .rest
                        .iter()
                        .position(|&b| b == b'\n')
                        .unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let len = self.rest.iter().take_while(|b| b.is_ascii_digit()).count();
        if len == 0 || len > 9 {
            return Err(Error::Format(format!("bad PNM {what}")));
        }
        let text = std::str::from_utf8(&self.rest[..len]).expect("ascii digits");
        self.rest = &self.rest[len..];
        text.parse()
            .map_err(|_| Error::Format(format!("bad PNM {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PNM (P5/P6)".into())),
    };
    let mut h = PnmHeader { rest: &bytes[2..] };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::Format(format!("unsupported PNM size {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match h.rest.first() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::Format("PNM header not terminated".into())),
    }
    let raster = &h.rest[1..];
    let need = width * height * channels;
    if raster.len() < need {
        return Err(Error::Format(format!(
            "PNM raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    let scale = maxval as f64;
    let data = raster[..need]
        .iter()
        .map(|&b| (f64::from(b) / scale).min(1.0))
        .collect();
    ImageTensor::new(height, width, channels, data)
}

pub fn encode_pnm(img: &ImageTensor) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new_with_limits(
        Cursor::new(bytes),
        png::Limits {
            bytes: MAX_PIXELS * 4,
        },
    );
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 || w.saturating_mul(h) > MAX_PIXELS {
        return Err(Error::Format(format!("unsupported png size {w}x{h}")));
    }
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format("indexed png was not expanded".into()))
        }
    };
    let out_channels = if src_channels <= 2 { 1 } else { 3 };
    let mut data = Vec::with_capacity(w * h * out_channels);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * src_channels].chunks_exact(src_channels) {
            // alpha is dropped
            for &b in &px[..out_channels] {
                data.push(f64::from(b) / 255.0);
            }
        }
    }
    ImageTensor::new(h, w, out_channels, data)
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let enc_err = |e: png::EncodingError| Error::Format(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(enc_err)?;
        writer.write_image_data(&img.to_u8()).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}
