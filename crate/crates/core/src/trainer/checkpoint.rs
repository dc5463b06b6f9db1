//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `GRSRCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every tensor
//! as raw little-endian `f64` values at the offsets the manifest lists.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderPair, RunConfig};
use crate::denoiser::{ConditioningMode, DenoiserParams, LoRAName, LoRAPair, LoRAParamSet, ParamGroup};
use crate::error::{Error, Result};
use crate::featenc::AdapterParams;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"GRSRCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Manifests larger than this are rejected before parsing.
const MAX_MANIFEST: u64 = 64 << 20;

/// One validation pass recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub stage: u8,
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub gram_distance: f64,
    pub perceptual: f64,
    /// Gram distance plus perceptual distance; during stage 3 each term is
    /// taken relative to its value at the start of the stage.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub config: RunConfig,
    pub denoiser: DenoiserParams,
    pub adapter: AdapterParams,
    pub history: Vec<ValidationRecord>,
}

impl Checkpoint {
    /// Every stored tensor with its qualified name, in container order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.denoiser.named_tensors();
        out.extend(self.adapter.named().into_iter().map(|(n, m)| (n.to_string(), m)));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name.starts_with("adapter.") {
            return self
                .adapter
                .named_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m);
        }
        self.denoiser.tensor_mut(name)
    }

    /// Tensors of one parameter group, cloned, keyed by name.
    pub fn group_snapshot(&self, group: ParamGroup) -> BTreeMap<String, Matrix> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| ParamGroup::of_param(n) == Some(group))
            .map(|(n, m)| (n, m.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, m) in self.named_tensors() {
            let group = ParamGroup::of_param(&name).expect("every stored tensor has a group");
            tensors.push(TensorEntry {
                name,
                group,
                shape: [m.rows(), m.cols()],
                offset: payload.len() as u64,
                len: (m.len() * 8) as u64,
            });
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            stage: self.stage,
            step: self.step,
            stride: self.config.codec_stride,
            encoders: self.config.encoders.clone(),
            cond_mode: self.denoiser.cond_mode,
            base_trainable: self.denoiser.base_trainable,
            base_frozen: self.denoiser.base_frozen,
            cond_tensor_trainable: self.denoiser.cond_tensor_trainable,
            adapter_trainable: self.adapter.trainable,
            lora_sets: self
                .denoiser
                .lora
                .iter()
                .map(|s| LoRASetMeta {
                    name: s.name,
                    rank: s.rank,
                    scaling: s.scaling,
                    trainable: s.trainable,
                    active: s.active,
                })
                .collect(),
            history: self.history.clone(),
            config: self.config.clone(),
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt(msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if mlen > MAX_MANIFEST || mlen > (bytes.len() - 20) as u64 {
            return Err(corrupt(format!("manifest length {mlen} exceeds the file")));
        }
        let (json, payload) = bytes[20..].split_at(mlen as usize);
        let m: Manifest = serde_json::from_slice(json)
            .map_err(|e| corrupt(format!("manifest does not parse: {e}")))?;
        if hex::encode(Sha256::digest(payload)) != m.payload_sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        m.config
            .validate()
            .map_err(|e| corrupt(format!("embedded run config is invalid: {e}")))?;
        if m.stride != m.config.codec_stride {
            return Err(corrupt(format!(
                "manifest stride {} disagrees with its config stride {}",
                m.stride, m.config.codec_stride
            )));
        }
        if m.encoders != m.config.encoders || m.cond_mode != m.config.cond_mode {
            return Err(corrupt("manifest encoders or conditioning disagree with its config".into()));
        }
        if m.stage > 3 {
            return Err(corrupt(format!("stage {} out of range", m.stage)));
        }

        let cfg = &m.config;
        let mut denoiser = DenoiserParams::init(cfg.denoiser.clone(), m.cond_mode, 0)
            .map_err(|e| corrupt(e.to_string()))?;
        denoiser.base_trainable = m.base_trainable;
        denoiser.base_frozen = m.base_frozen;
        denoiser.cond_tensor_trainable = m.cond_tensor_trainable;
        let registry = cfg.denoiser.lora_targets();
        for meta in &m.lora_sets {
            if denoiser.lora_set(meta.name).is_some() {
                return Err(corrupt(format!("adapter set {} listed twice", meta.name)));
            }
            let prefix = format!("lora.{}.", meta.name);
            let mut targets = BTreeMap::new();
            for e in m.tensors.iter().filter(|e| e.name.starts_with(&prefix)) {
                let Some(layer) = e.name[prefix.len()..].strip_suffix(".a") else {
                    continue;
                };
                let spec = registry
                    .iter()
                    .find(|l| l.name == layer)
                    .ok_or_else(|| corrupt(format!("{} targets unknown layer {layer}", meta.name)))?;
                targets.insert(
                    layer.to_string(),
                    LoRAPair {
                        a: Matrix::zeros(meta.rank, spec.fan_in),
                        b: Matrix::zeros(spec.fan_out, meta.rank),
                    },
                );
            }
            denoiser.lora.push(LoRAParamSet {
                name: meta.name,
                rank: meta.rank,
                scaling: meta.scaling,
                targets,
                trainable: meta.trainable,
                active: meta.active,
            });
        }
        let cd = cfg.encoders.conditioning.dim;
        let mut ckpt = Checkpoint {
            stage: m.stage,
            step: m.step,
            config: m.config.clone(),
            denoiser,
            adapter: AdapterParams::zeros(cd, cd, cfg.denoiser.cond_dim),
            history: m.history.clone(),
        };
        ckpt.adapter.trainable = m.adapter_trainable;

        let expected: BTreeMap<String, (usize, usize)> = ckpt
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if expected.len() != m.tensors.len() {
            return Err(corrupt(format!(
                "manifest lists {} tensors, the model has {}",
                m.tensors.len(),
                expected.len()
            )));
        }
        let mut next_offset = 0u64;
        for e in &m.tensors {
            let want = expected
                .get(&e.name)
                .ok_or_else(|| corrupt(format!("unexpected tensor {}", e.name)))?;
            if (e.shape[0], e.shape[1]) != *want {
                return Err(corrupt(format!(
                    "tensor {} has shape {:?}, expected {want:?}",
                    e.name, e.shape
                )));
            }
            if ParamGroup::of_param(&e.name) != Some(e.group) {
                return Err(corrupt(format!("tensor {} is filed under the wrong group", e.name)));
            }
            let n = want.0 * want.1;
            if e.offset != next_offset || e.len != (n * 8) as u64 {
                return Err(corrupt(format!("tensor {} has a bad offset or length", e.name)));
            }
            let end = e.offset + e.len;
            if end > payload.len() as u64 {
                return Err(corrupt(format!("tensor {} runs past the payload", e.name)));
            }
            let data: Vec<f64> = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("tensor {} holds non-finite values", e.name)));
            }
            *ckpt.tensor_mut(&e.name).expect("expected tensors resolve") =
                Matrix::from_vec(want.0, want.1, data).expect("length checked");
            next_offset = end;
        }
        if next_offset != payload.len() as u64 {
            return Err(corrupt("trailing bytes after the last tensor".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoRASetMeta {
    name: LoRAName,
    rank: usize,
    scaling: f64,
    trainable: bool,
    active: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    stage: u8,
    step: u64,
    stride: usize,
    encoders: EncoderPair,
    cond_mode: ConditioningMode,
    base_trainable: bool,
    base_frozen: bool,
    cond_tensor_trainable: bool,
    adapter_trainable: bool,
    lora_sets: Vec<LoRASetMeta>,
    history: Vec<ValidationRecord>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and requires the container's codec stride to equal `stride`.
pub fn load_checkpoint_with_stride(path: impl AsRef<Path>, stride: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.codec_stride != stride {
        return Err(Error::Config(format!(
            "checkpoint codec stride {} does not match the configured stride {stride}",
            ckpt.config.codec_stride
        )));
    }
    Ok(ckpt)
}
