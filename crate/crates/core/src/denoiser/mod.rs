//! Conditioned denoising network with injectable low-rank adapter sets.
//!
//! Three resolution levels: two 3x3 conv stages with average pooling on the
//! way down, a bottleneck with a conv, cross-attention to the conditioning
//! tokens and a residual MLP, then nearest upsampling with skip concatenation
//! on the way up. All weights are stored `[in, out]`; conv weights are
//! `[9 * in, out]` over `(ky, kx, channel)` patches.

mod lora;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::codec::LatentTensor;
use crate::error::{config_err, shape_err, Result};
use crate::featenc::AdapterParams;
use crate::losses::{NoiseSchedule, ScheduleConfig};
use crate::params::Binder;
use crate::tensor::Matrix;

pub use lora::{lora_param_name, LoRAActivation, LoRAName, LoRAPair, LoRAParamSet, DEFAULT_RANK};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Adapter-projected encoder features of the input.
    #[default]
    Visual,
    /// A constant all-zero token block.
    FixedTensor,
    /// A token block trained in place of the adapter.
    LearnableTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub latent_channels: usize,
    pub width: usize,
    pub bottleneck_width: usize,
    pub cond_dim: usize,
    pub cond_tokens: usize,
    pub time_dim: usize,
    /// Timestep the one-step restoration path runs at.
    pub sr_timestep: usize,
    pub schedule: ScheduleConfig,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            width: 32,
            bottleneck_width: 64,
            cond_dim: 48,
            cond_tokens: 64,
            time_dim: 32,
            sr_timestep: 20,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3,
    Linear,
}

/// One weight-bearing layer. `fan_in` already includes the 3x3 window for convs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub lora_target: bool,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_channels,
            self.width,
            self.bottleneck_width,
            self.cond_dim,
            self.cond_tokens,
            self.time_dim,
        ];
        if dims.contains(&0) {
            return Err(config_err!("denoiser dimensions must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(config_err!("time embedding dim must be even"));
        }
        let sched = NoiseSchedule::new(&self.schedule)?;
        if self.sr_timestep >= sched.steps() {
            return Err(config_err!(
                "sr_timestep {} is outside the {}-step schedule",
                self.sr_timestep,
                sched.steps()
            ));
        }
        Ok(())
    }

    /// Every weight-bearing layer in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let (lc, c1, c2) = (self.latent_channels, self.width, self.bottleneck_width);
        let conv = |name, i: usize, o| LayerSpec {
            name,
            kind: LayerKind::Conv3,
            fan_in: 9 * i,
            fan_out: o,
            lora_target: true,
        };
        let lin = |name, i, o, lora_target| LayerSpec {
            name,
            kind: LayerKind::Linear,
            fan_in: i,
            fan_out: o,
            lora_target,
        };
        vec![
            lin("time.fc1", self.time_dim, c1, false),
            lin("time.fc2", c1, c2, false),
            conv("conv_in", lc, c1),
            conv("enc1", c1, c1),
            conv("enc2", c1, c2),
            conv("mid", c2, c2),
            lin("attn.q", c2, c2, false),
            lin("attn.k", self.cond_dim, c2, false),
            lin("attn.v", self.cond_dim, c2, false),
            lin("attn.o", c2, c2, false),
            lin("mlp.fc1", c2, 2 * c2, true),
            lin("mlp.fc2", 2 * c2, c2, true),
            conv("dec2", 2 * c2, c2),
            conv("dec1", c2 + c1, c1),
            conv("conv_out", c1, lc),
        ]
    }

    pub fn lora_targets(&self) -> Vec<LayerSpec> {
        self.layers().into_iter().filter(|l| l.lora_target).collect()
    }

    /// Noise level the restoration output is scaled by.
    pub fn sr_scale(&self) -> Result<f64> {
        Ok(NoiseSchedule::new(&self.schedule)?.noise_level(self.sr_timestep))
    }
}

/// Parameter groups, each frozen or trained as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Pix,
    Sem,
    Gram,
    Adapter,
    CondTensor,
}

impl ParamGroup {
    pub fn of_lora(name: LoRAName) -> Self {
        match name {
            LoRAName::Pix => ParamGroup::Pix,
            LoRAName::Sem => ParamGroup::Sem,
            LoRAName::Gram => ParamGroup::Gram,
        }
    }

    /// Group owning a fully qualified parameter name.
    pub fn of_param(name: &str) -> Option<Self> {
        let mut parts = name.split('.');
        match parts.next()? {
            "base" => Some(ParamGroup::Base),
            "adapter" => Some(ParamGroup::Adapter),
            "cond_tensor" => Some(ParamGroup::CondTensor),
            "lora" => parts.next()?.parse::<LoRAName>().ok().map(Self::of_lora),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    /// `base.<layer>.w` and `base.<layer>.b`.
    pub base: BTreeMap<String, Matrix>,
    pub base_trainable: bool,
    /// Set once pretraining finishes; the base can never train again.
    pub base_frozen: bool,
    pub cond_mode: ConditioningMode,
    /// `cond_tokens x cond_dim`, used by the two tensor conditioning modes.
    pub cond_tensor: Matrix,
    pub cond_tensor_trainable: bool,
    /// Injected sets in injection order.
    pub lora: Vec<LoRAParamSet>,
}

impl DenoiserParams {
    pub fn init(arch: DenoiserArch, cond_mode: ConditioningMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = BTreeMap::new();
        for l in arch.layers() {
            let mut std = (2.0 / l.fan_in as f64).sqrt();
            if l.name == "conv_out" || l.name == "attn.o" || l.name == "mlp.fc2" {
                // residual branches and the output start small
                std *= 0.1;
            }
            let dist = Normal::new(0.0, std).expect("positive std");
            let w = Matrix::from_fn(l.fan_in, l.fan_out, |_, _| dist.sample(&mut rng));
            base.insert(format!("base.{}.w", l.name), w);
            base.insert(format!("base.{}.b", l.name), Matrix::zeros(1, l.fan_out));
        }
        let cond_tensor = Matrix::zeros(arch.cond_tokens, arch.cond_dim);
        Ok(Self {
            arch,
            base,
            base_trainable: false,
            base_frozen: false,
            cond_mode,
            cond_tensor,
            cond_tensor_trainable: false,
            lora: Vec::new(),
        })
    }

    pub fn freeze_base(&mut self) {
        self.base_trainable = false;
        self.base_frozen = true;
    }

    pub fn lora_set(&self, name: LoRAName) -> Option<&LoRAParamSet> {
        self.lora.iter().find(|s| s.name == name)
    }

    pub fn lora_set_mut(&mut self, name: LoRAName) -> Option<&mut LoRAParamSet> {
        self.lora.iter_mut().find(|s| s.name == name)
    }

    /// Registers a zero-initialized adapter set on `targets` (layer names).
    pub fn inject_lora(
        &mut self,
        name: LoRAName,
        rank: usize,
        targets: &[&str],
        seed: u64,
    ) -> Result<&LoRAParamSet> {
        if self.lora_set(name).is_some() {
            return Err(config_err!("adapter set {name} is already injected"));
        }
        let registry = self.arch.lora_targets();
        let mut shapes = Vec::with_capacity(targets.len());
        for t in targets {
            let spec = registry
                .iter()
                .find(|l| l.name == *t)
                .ok_or_else(|| config_err!("{t:?} is not a conv or MLP layer of the denoiser"))?;
            shapes.push((spec.name.to_string(), spec.fan_in, spec.fan_out));
        }
        self.lora.push(LoRAParamSet::new(name, rank, &shapes, seed)?);
        Ok(self.lora.last().expect("just pushed"))
    }

    /// Injects pix, sem and gram on every registered target.
    pub fn inject_all(&mut self, rank: usize, seed: u64) -> Result<()> {
        let targets: Vec<&'static str> = self.arch.lora_targets().iter().map(|l| l.name).collect();
        for name in LoRAName::ALL {
            self.inject_lora(name, rank, &targets, seed)?;
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        let mut g = BTreeSet::new();
        if self.base_trainable {
            g.insert(ParamGroup::Base);
        }
        if self.cond_tensor_trainable {
            g.insert(ParamGroup::CondTensor);
        }
        for s in &self.lora {
            if s.trainable {
                g.insert(ParamGroup::of_lora(s.name));
            }
        }
        g
    }

    /// Every tensor owned by the denoiser with its qualified name.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> =
            self.base.iter().map(|(k, v)| (k.clone(), v)).collect();
        out.push(("cond_tensor".to_string(), &self.cond_tensor));
        for s in &self.lora {
            for (layer, p) in &s.targets {
                out.push((lora_param_name(s.name, layer, 'a'), &p.a));
                out.push((lora_param_name(s.name, layer, 'b'), &p.b));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name == "cond_tensor" {
            return Some(&mut self.cond_tensor);
        }
        if self.base.contains_key(name) {
            return self.base.get_mut(name);
        }
        let rest = name.strip_prefix("lora.")?;
        let (set, rest) = rest.split_once('.')?;
        let (layer, factor) = rest.rsplit_once('.')?;
        let set = self.lora_set_mut(set.parse().ok()?)?;
        let pair = set.targets.get_mut(layer)?;
        match factor {
            "a" => Some(&mut pair.a),
            "b" => Some(&mut pair.b),
            _ => None,
        }
    }

    fn check_latent(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.arch.latent_channels {
            return Err(shape_err!(
                "denoiser expects {} latent channels, got {c}",
                self.arch.latent_channels
            ));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(shape_err!("latent grid {h}x{w} must be divisible by 4"));
        }
        Ok(())
    }

    /// Visual token count follows the input size, so only the width is fixed.
    fn check_tokens(&self, shape: (usize, usize)) -> Result<()> {
        if shape.0 == 0 || shape.1 != self.arch.cond_dim {
            return Err(shape_err!(
                "conditioning tokens {shape:?}, expected N x {}",
                self.arch.cond_dim
            ));
        }
        Ok(())
    }

    /// Token block the forward pass attends to. `visual` is required in visual mode
    /// and ignored otherwise.
    pub fn cond_var(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        visual: Option<Var>,
        track: bool,
    ) -> Result<Var> {
        match self.cond_mode {
            ConditioningMode::Visual => {
                let v = visual.ok_or_else(|| config_err!("visual conditioning needs tokens"))?;
                self.check_tokens(tape.shape(v))?;
                Ok(v)
            }
            ConditioningMode::FixedTensor => Ok(tape.constant(self.cond_tensor.clone())),
            ConditioningMode::LearnableTensor => Ok(binder.bind(
                tape,
                "cond_tensor",
                &self.cond_tensor,
                track && self.cond_tensor_trainable,
            )),
        }
    }

    fn bias(&self, tape: &mut Tape, binder: &mut Binder, layer: &str, track: bool) -> Var {
        let name = format!("base.{layer}.b");
        binder.bind(tape, &name, &self.base[&name], track && self.base_trainable)
    }

    /// Stored weight plus `scaling * (B A)^T` of every active set targeting `layer`,
    /// added in injection order.
    fn weight(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer: &str,
        act: LoRAActivation,
        track: bool,
    ) -> Var {
        let name = format!("base.{layer}.w");
        let mut w = binder.bind(tape, &name, &self.base[&name], track && self.base_trainable);
        for set in &self.lora {
            if !act.is_active(set.name) {
                continue;
            }
            let Some(pair) = set.targets.get(layer) else { continue };
            let t = track && set.trainable;
            let a = binder.bind(tape, &lora_param_name(set.name, layer, 'a'), &pair.a, t);
            let b = binder.bind(tape, &lora_param_name(set.name, layer, 'b'), &pair.b, t);
            let at = tape.transpose(a);
            let bt = tape.transpose(b);
            let d = tape.matmul(at, bt);
            let d = tape.scale(d, set.scaling);
            w = tape.add(w, d);
        }
        w
    }

    fn linear(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        layer: &str,
        act: LoRAActivation,
        track: bool,
    ) -> Var {
        let w = self.weight(tape, binder, layer, act, track);
        let b = self.bias(tape, binder, layer, track);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        h: usize,
        w: usize,
        layer: &str,
        act: LoRAActivation,
        track: bool,
    ) -> Var {
        let cols = tape.im2col3(x, h, w);
        self.linear(tape, binder, cols, layer, act, track)
    }

    /// Raw network output (unit-scale noise estimate) at timestep `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        z: Var,
        lh: usize,
        lw: usize,
        cond: Var,
        t: usize,
        act: LoRAActivation,
        track: bool,
    ) -> Result<Var> {
        let (rows, c) = tape.shape(z);
        if rows != lh * lw {
            return Err(shape_err!("latent var {:?} is not a {lh}x{lw} grid", tape.shape(z)));
        }
        self.check_latent(lh, lw, c)?;
        self.check_tokens(tape.shape(cond))?;
        let sil = |tape: &mut Tape, v| tape.silu(v);

        let temb = tape.constant(timestep_embedding(t as f64, self.arch.time_dim));
        let temb = self.linear(tape, binder, temb, "time.fc1", act, track);
        let temb = sil(tape, temb);
        let temb2 = self.linear(tape, binder, temb, "time.fc2", act, track);

        // fixed input affine mapping [0, 1] latents to [-1, 1]
        let shift = tape.constant(Matrix::filled(1, c, -0.5));
        let x = tape.add_row(z, shift);
        let x = tape.scale(x, 2.0);

        let h = self.conv(tape, binder, x, lh, lw, "conv_in", act, track);
        let h = tape.add_row(h, temb);
        let h = sil(tape, h);
        let h = self.conv(tape, binder, h, lh, lw, "enc1", act, track);
        let skip1 = sil(tape, h);

        let (mh, mw) = (lh / 2, lw / 2);
        let h = tape.avg_pool2(skip1, lh, lw);
        let h = self.conv(tape, binder, h, mh, mw, "enc2", act, track);
        let skip2 = sil(tape, h);

        let (bh, bw) = (mh / 2, mw / 2);
        let h = tape.avg_pool2(skip2, mh, mw);
        let h = self.conv(tape, binder, h, bh, bw, "mid", act, track);
        let h = tape.add_row(h, temb2);
        let mut h = sil(tape, h);

        // cross-attention from bottleneck cells to the conditioning tokens
        let normed = tape.layer_norm_rows(h);
        let q = self.linear(tape, binder, normed, "attn.q", act, track);
        let k = self.linear(tape, binder, cond, "attn.k", act, track);
        let v = self.linear(tape, binder, cond, "attn.v", act, track);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, 1.0 / (self.arch.bottleneck_width as f64).sqrt());
        let attn = tape.softmax_rows(logits);
        let ctx = tape.matmul(attn, v);
        let ctx = self.linear(tape, binder, ctx, "attn.o", act, track);
        h = tape.add(h, ctx);

        let normed = tape.layer_norm_rows(h);
        let m = self.linear(tape, binder, normed, "mlp.fc1", act, track);
        let m = sil(tape, m);
        let m = self.linear(tape, binder, m, "mlp.fc2", act, track);
        h = tape.add(h, m);

        let up = tape.upsample2(h, bh, bw);
        let cat = tape.concat_cols(up, skip2);
        let h = self.conv(tape, binder, cat, mh, mw, "dec2", act, track);
        let h = sil(tape, h);

        let up = tape.upsample2(h, mh, mw);
        let cat = tape.concat_cols(up, skip1);
        let h = self.conv(tape, binder, cat, lh, lw, "dec1", act, track);
        let h = sil(tape, h);
        Ok(self.conv(tape, binder, h, lh, lw, "conv_out", act, track))
    }

    /// Restoration-path epsilon: the noise estimate at the fixed timestep,
    /// scaled to latent units.
    #[allow(clippy::too_many_arguments)]
    pub fn sr_forward_var(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        z: Var,
        lh: usize,
        lw: usize,
        cond: Var,
        act: LoRAActivation,
        track: bool,
    ) -> Result<Var> {
        let raw = self.forward_var(
            tape,
            binder,
            z,
            lh,
            lw,
            cond,
            self.arch.sr_timestep,
            act,
            track,
        )?;
        Ok(tape.scale(raw, self.arch.sr_scale()?))
    }

    /// Noise estimate at timestep `t`; `cond` is the visual token block
    /// (ignored by the tensor conditioning modes).
    pub fn predict_noise(
        &self,
        z: &LatentTensor,
        cond: &Matrix,
        t: usize,
        act: LoRAActivation,
    ) -> Result<LatentTensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let zv = tape.constant(z.values().clone());
        let tokens = tape.constant(cond.clone());
        let cv = self.cond_var(&mut tape, &mut binder, Some(tokens), false)?;
        let out = self.forward_var(
            &mut tape, &mut binder, zv, z.height(), z.width(), cv, t, act, false,
        )?;
        LatentTensor::new(z.height(), z.width(), tape.value(out).clone())
    }

    /// One-step restoration epsilon for latent `z`.
    pub fn predict(&self, z: &LatentTensor, cond: &Matrix, act: LoRAActivation) -> Result<LatentTensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let zv = tape.constant(z.values().clone());
        let tokens = tape.constant(cond.clone());
        let cv = self.cond_var(&mut tape, &mut binder, Some(tokens), false)?;
        let out =
            self.sr_forward_var(&mut tape, &mut binder, zv, z.height(), z.width(), cv, act, false)?;
        LatentTensor::new(z.height(), z.width(), tape.value(out).clone())
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_fn(1, dim, |_, i| {
        let k = i % half;
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        if i < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

/// Sets which groups train in `stage`: 0 base; 1 pix and the conditioning
/// adapter; 2 sem and the adapter; 3 gram alone. In tensor conditioning
/// modes the learnable token block takes the adapter's place.
pub fn set_stage_trainability(
    stage: u8,
    params: &mut DenoiserParams,
    adapter: &mut AdapterParams,
) -> Result<()> {
    if stage > 3 {
        return Err(config_err!("unknown stage {stage}"));
    }
    if stage == 0 && params.base_frozen {
        return Err(config_err!("the base denoiser is frozen and cannot be pretrained again"));
    }
    if stage >= 1 {
        for name in LoRAName::ALL {
            if params.lora_set(name).is_none() {
                return Err(config_err!("stage {stage} needs adapter set {name} injected"));
            }
        }
    }
    params.base_trainable = stage == 0;
    for set in &mut params.lora {
        set.trainable = matches!(
            (stage, set.name),
            (1, LoRAName::Pix) | (2, LoRAName::Sem) | (3, LoRAName::Gram)
        );
    }
    let conditioning_stage = stage == 1 || stage == 2;
    adapter.trainable = conditioning_stage && params.cond_mode == ConditioningMode::Visual;
    params.cond_tensor_trainable =
        conditioning_stage && params.cond_mode == ConditioningMode::LearnableTensor;
    Ok(())
}
