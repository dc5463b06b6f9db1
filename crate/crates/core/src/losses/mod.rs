//! Training objectives: pixel MSE, a feature-space perceptual distance, the
//! distillation gradient from the frozen base, the Gram texture loss, and
//! their per-stage weighted combination.

mod schedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::codec::LatentTensor;
use crate::denoiser::{DenoiserParams, LoRAActivation};
use crate::error::{config_err, shape_err, Result};
use crate::featenc::{gram, gram_distance, gram_var, FrozenEncoder, GramNorm};
use crate::image::ImageTensor;
use crate::params::Binder;
use crate::tensor::Matrix;

pub use schedule::{NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
    pub csd: f64,
    pub gram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perceptual: 2.0,
            csd: 1.0,
            gram: 500.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mse", self.mse),
            ("perceptual", self.perceptual),
            ("csd", self.csd),
            ("gram", self.gram),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Anything with a shape and a flat value buffer.
pub trait LossInput {
    fn dims(&self) -> (usize, usize, usize);
    fn flat(&self) -> &[f64];
}

impl LossInput for ImageTensor {
    fn dims(&self) -> (usize, usize, usize) {
        self.shape()
    }
    fn flat(&self) -> &[f64] {
        self.data()
    }
}

impl LossInput for LatentTensor {
    fn dims(&self) -> (usize, usize, usize) {
        self.shape()
    }
    fn flat(&self) -> &[f64] {
        self.values().data()
    }
}

impl LossInput for Matrix {
    fn dims(&self) -> (usize, usize, usize) {
        (self.rows(), self.cols(), 1)
    }
    fn flat(&self) -> &[f64] {
        self.data()
    }
}

pub fn mse_loss<T: LossInput>(pred: &T, target: &T) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("mse of {:?} vs {:?}", pred.dims(), target.dims()));
    }
    let (a, b) = (pred.flat(), target.flat());
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Encoder layers compared by the perceptual distance; 0 is the patch embedding.
pub const PERCEPTUAL_LAYERS: [usize; 2] = [1, 2];

fn check_layers(enc: &FrozenEncoder) -> Result<()> {
    let depth = enc.spec().depth;
    if let Some(l) = PERCEPTUAL_LAYERS.iter().find(|&&l| l > depth) {
        return Err(config_err!("perceptual layer {l} exceeds encoder depth {depth}"));
    }
    Ok(())
}

/// Per-layer features of a fixed target, for repeated comparison.
pub fn perceptual_targets(enc: &FrozenEncoder, target: &ImageTensor) -> Result<Vec<Matrix>> {
    check_layers(enc)?;
    let mut tape = Tape::new();
    let x = tape.constant(target.to_matrix());
    let layers = enc.forward_var(&mut tape, x, target.height(), target.width())?;
    Ok(PERCEPTUAL_LAYERS
        .iter()
        .map(|&l| tape.value(layers[l]).clone())
        .collect())
}

/// Mean over the compared layers of the mean squared feature difference.
pub fn perceptual_var(
    tape: &mut Tape,
    enc: &FrozenEncoder,
    pred: Var,
    h: usize,
    w: usize,
    targets: &[Matrix],
) -> Result<Var> {
    check_layers(enc)?;
    let layers = enc.forward_var(tape, pred, h, w)?;
    let mut total: Option<Var> = None;
    for (&l, t) in PERCEPTUAL_LAYERS.iter().zip(targets) {
        let tv = tape.constant(t.clone());
        let d = tape.mse(layers[l], tv);
        total = Some(match total {
            Some(acc) => tape.add(acc, d),
            None => d,
        });
    }
    let total = total.ok_or_else(|| config_err!("no perceptual layers configured"))?;
    Ok(tape.scale(total, 1.0 / PERCEPTUAL_LAYERS.len() as f64))
}

pub fn perceptual_loss(pred: &ImageTensor, target: &ImageTensor, enc: &FrozenEncoder) -> Result<f64> {
    pred.check_same_shape(target)?;
    let targets = perceptual_targets(enc, target)?;
    let mut tape = Tape::new();
    let x = tape.constant(pred.to_matrix());
    let l = perceptual_var(&mut tape, enc, x, pred.height(), pred.width(), &targets)?;
    Ok(tape.value(l).get(0, 0))
}

/// Gram distance between encoder features of the two images.
pub fn gram_loss(
    x_pred: &ImageTensor,
    x_gt: &ImageTensor,
    enc: &FrozenEncoder,
    norm: GramNorm,
) -> Result<f64> {
    x_pred.check_same_shape(x_gt)?;
    let gp = gram(&enc.extract(x_pred)?, norm)?;
    let gt = gram(&enc.extract(x_gt)?, norm)?;
    gram_distance(&gp, &gt)
}

/// Differentiable Gram loss of a `[h*w, c]` image value against a fixed target Gram matrix.
pub fn gram_loss_var(
    tape: &mut Tape,
    enc: &FrozenEncoder,
    pred: Var,
    h: usize,
    w: usize,
    target: &Matrix,
    norm: GramNorm,
) -> Result<Var> {
    let layers = enc.forward_var(tape, pred, h, w)?;
    let f = *layers.last().expect("encoder returns at least one layer");
    let g = gram_var(tape, f, norm)?;
    if tape.shape(g) != target.shape() {
        return Err(shape_err!("gram {:?} vs target {:?}", tape.shape(g), target.shape()));
    }
    let t = tape.constant(target.clone());
    Ok(tape.mse(g, t))
}

/// Distillation direction from the frozen base at a random timestep:
/// `eps(z_t, cond, t) - eps(z_t, null, t)` with `null` the all-zero token block.
/// The result is the gradient with respect to `z_pred` (unit weight).
pub fn csd_loss_gradient(
    z_pred: &LatentTensor,
    cond: &Matrix,
    schedule: &NoiseSchedule,
    base: &DenoiserParams,
    seed: u64,
) -> Result<Matrix> {
    if !base.base_frozen {
        return Err(config_err!("distillation needs a frozen pretrained base"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(0..schedule.steps());
    let (sa, sn) = (schedule.alpha_bar(t).sqrt(), schedule.noise_level(t));
    let noisy = z_pred
        .values()
        .map(|v| v * sa)
        .zip_map(
            &Matrix::from_fn(z_pred.values().rows(), z_pred.values().cols(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            }),
            |a, n| a + sn * n,
        )?;
    let run = |tokens: Matrix| -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let zv = tape.constant(noisy.clone());
        let cv = tape.constant(tokens);
        let out = base.forward_var(
            &mut tape,
            &mut binder,
            zv,
            z_pred.height(),
            z_pred.width(),
            cv,
            t,
            LoRAActivation::NONE,
            false,
        )?;
        Ok(tape.value(out).clone())
    };
    let conditional = run(cond.clone())?;
    let unconditional = run(Matrix::zeros(cond.rows(), cond.cols()))?;
    conditional.sub(&unconditional)
}

/// Scalar whose gradient with respect to `z_pred` is `grad / numel`. Its value,
/// `<grad, z_pred> / numel`, is what the composite reports as the distillation term.
pub fn csd_surrogate_var(tape: &mut Tape, z_pred: Var, grad: &Matrix) -> Result<Var> {
    if tape.shape(z_pred) != grad.shape() {
        return Err(shape_err!("distillation gradient {:?} vs {:?}", grad.shape(), tape.shape(z_pred)));
    }
    let n = grad.len() as f64;
    let g = tape.constant(grad.clone());
    let prod = tape.mul(g, z_pred);
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / n))
}

/// Raw (unweighted) loss terms available for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: Option<f64>,
    pub perceptual: Option<f64>,
    pub csd: Option<f64>,
    pub gram: Option<f64>,
}

/// Which terms enter the objective at each stage.
pub fn stage_terms(stage: u8) -> Result<[bool; 4]> {
    match stage {
        1 => Ok([true, false, false, false]),
        2 => Ok([true, true, true, false]),
        3 => Ok([true, true, true, true]),
        other => Err(config_err!("no composite objective for stage {other}")),
    }
}

pub fn composite_loss(stage: u8, terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let used = stage_terms(stage)?;
    let entries = [
        ("mse", terms.mse, weights.mse),
        ("perceptual", terms.perceptual, weights.perceptual),
        ("csd", terms.csd, weights.csd),
        ("gram", terms.gram, weights.gram),
    ];
    let mut total = 0.0;
    for ((name, value, weight), on) in entries.into_iter().zip(used) {
        if !on {
            continue;
        }
        let v = value.ok_or_else(|| config_err!("stage {stage} needs the {name} term"))?;
        total += weight * v;
    }
    Ok(total)
}
