//! JSON documents exchanged with the HTTP service.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use gramsr_core::guidance::{GuidanceMode, GuidanceScales};
use gramsr_core::image::{decode_png, encode_png, ImageTensor};
use gramsr_core::trainer::Checkpoint;
use serde::{Deserialize, Serialize};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    /// Base64 of a PNG file.
    pub image: String,
    #[serde(default = "one")]
    pub lambda_pix: f64,
    #[serde(default = "one")]
    pub lambda_sem: f64,
    #[serde(default = "one")]
    pub lambda_gram: f64,
    #[serde(default)]
    pub mode: GuidanceMode,
}

impl InferRequest {
    pub fn new(png: &[u8], scales: GuidanceScales, mode: GuidanceMode) -> Self {
        Self {
            image: BASE64.encode(png),
            lambda_pix: scales.lambda_pix,
            lambda_sem: scales.lambda_sem,
            lambda_gram: scales.lambda_gram,
            mode,
        }
    }

    pub fn scales(&self) -> GuidanceScales {
        GuidanceScales::new(self.lambda_pix, self.lambda_sem, self.lambda_gram)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub decode_ms: f64,
    pub infer_ms: f64,
    pub encode_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    /// Base64 PNG at four times the input resolution.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub scales: GuidanceScales,
    pub mode: GuidanceMode,
    pub timings: Timings,
}

impl InferResponse {
    pub fn png_bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        BASE64.decode(&self.image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSeeds {
    pub conditioning: u64,
    pub gram: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub stage: u8,
    pub codec_stride: usize,
    pub encoder_seeds: EncoderSeeds,
    pub uptime_seconds: f64,
}

impl Health {
    pub fn of(ckpt: &Checkpoint, uptime_seconds: f64) -> Self {
        Self {
            stage: ckpt.stage,
            codec_stride: ckpt.config.codec_stride,
            encoder_seeds: EncoderSeeds {
                conditioning: ckpt.config.encoders.conditioning.seed,
                gram: ckpt.config.encoders.gram.seed,
            },
            uptime_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Why a request body was rejected before inference.
#[derive(Debug)]
pub enum RequestError {
    Json(serde_json::Error),
    Base64(base64::DecodeError),
    Image(gramsr_core::Error),
    Scales(gramsr_core::Error),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestError::Json(e) => write!(f, "request is not a valid infer document: {e}"),
            RequestError::Base64(e) => write!(f, "image is not valid base64: {e}"),
            RequestError::Image(e) => write!(f, "image is not a decodable PNG: {e}"),
            RequestError::Scales(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RequestError {}

/// Parses a JSON infer body down to the LQ image, scales and mode.
pub fn decode_infer_request(
    body: &[u8],
) -> Result<(ImageTensor, GuidanceScales, GuidanceMode), RequestError> {
    let req: InferRequest = serde_json::from_slice(body).map_err(RequestError::Json)?;
    let (img, scales) = decode_request_parts(&req)?;
    Ok((img, scales, req.mode))
}

pub(crate) fn decode_request_parts(
    req: &InferRequest,
) -> Result<(ImageTensor, GuidanceScales), RequestError> {
    let scales = req.scales();
    scales.validate().map_err(RequestError::Scales)?;
    let png = BASE64.decode(req.image.trim()).map_err(RequestError::Base64)?;
    let img = decode_png(&png).map_err(RequestError::Image)?;
    Ok((img, scales))
}

pub(crate) fn encode_response_image(img: &ImageTensor) -> gramsr_core::Result<String> {
    Ok(BASE64.encode(encode_png(img)?))
}
