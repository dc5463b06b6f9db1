//! Base pretraining, the three adapter stages, validation and early stopping.

mod checkpoint;
mod config;
mod data;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::codec::LatentTensor;
use crate::degrade::degrade;
use crate::denoiser::{set_stage_trainability, DenoiserParams, LoRAActivation, LoRAName};
use crate::error::{config_err, Error, Result};
use crate::featenc::{adapt, adapt_var, gram, AdapterParams};
use crate::guidance::{infer, GuidanceScales};
use crate::image::{ImageTensor, MetricReport};
use crate::losses::{
    csd_loss_gradient, csd_surrogate_var, gram_loss_var, perceptual_targets, perceptual_var,
    stage_terms, NoiseSchedule,
};
use crate::params::{Binder, GradMap};
use crate::pipeline::Pipeline;
use crate::tensor::Matrix;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_stride, save_checkpoint, Checkpoint, ValidationRecord,
    FORMAT_VERSION, MAGIC,
};
pub use config::{
    DataConfig, EarlyStopping, EncoderPair, LearningRates, RunConfig, Seeds, StageSteps,
};
pub use data::{synthetic_corpus, texture_image, Dataset, Pair, TextureKind};
pub use optim::Adam;

/// A trained checkpoint plus the mean training loss of every step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Untrained stage-0 model: seeded base, initial adapter, no adapter sets yet.
pub fn init_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let denoiser = DenoiserParams::init(cfg.denoiser.clone(), cfg.cond_mode, cfg.seeds.model)?;
    let dim = cfg.encoders.conditioning.dim;
    let adapter = AdapterParams::init(dim, dim, cfg.denoiser.cond_dim, cfg.seeds.model ^ 0xADA7);
    Ok(Checkpoint {
        stage: 0,
        step: 0,
        config: cfg.clone(),
        denoiser,
        adapter,
        history: Vec::new(),
    })
}

fn stage_rng(cfg: &RunConfig, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seeds.train ^ (u64::from(stage) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn apply_update(ckpt: &mut Checkpoint, opt: &mut Adam, grads: &GradMap) -> Result<()> {
    opt.begin_step();
    for (name, g) in grads {
        let p = ckpt
            .tensor_mut(name)
            .ok_or_else(|| Error::Data(format!("gradient for unknown parameter {name}")))?;
        opt.update(name, p, g);
    }
    Ok(())
}

fn mean_loss(total: f64, n: usize) -> f64 {
    total / n as f64
}

/// Trains the base as a noise predictor on HQ latents, then freezes it and
/// injects the three zero-initialized adapter sets.
pub fn pretrain_base(cfg: &RunConfig) -> Result<Checkpoint> {
    let data = Dataset::build(cfg)?;
    Ok(pretrain_with(cfg, &data)?.checkpoint)
}

pub fn pretrain_with(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut ckpt = init_checkpoint(cfg)?;
    let pipeline = Pipeline::new(cfg)?;
    let schedule = NoiseSchedule::new(&cfg.denoiser.schedule)?;
    set_stage_trainability(0, &mut ckpt.denoiser, &mut ckpt.adapter)?;
    // the base is conditioned on the initial adapter's view of the clean image
    let tokens: Vec<Matrix> = data
        .train
        .iter()
        .map(|hq| adapt(&pipeline.cond_encoder.extract(hq)?, &ckpt.adapter))
        .collect::<Result<_>>()?;
    let latents: Vec<LatentTensor> = data
        .train
        .iter()
        .map(|hq| pipeline.codec.encode(hq))
        .collect::<Result<_>>()?;
    let mut rng = stage_rng(cfg, 0);
    let mut opt = Adam::new(cfg.learning_rates.pretrain);
    let mut losses = Vec::with_capacity(cfg.max_steps.pretrain);
    for _ in 0..cfg.max_steps.pretrain {
        let mut grads = GradMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..data.train.len());
            let t = rng.random_range(0..schedule.steps());
            let drop = rng.random::<f64>() < cfg.cond_dropout;
            let z0 = &latents[idx];
            let noise = Matrix::from_fn(z0.values().rows(), z0.values().cols(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let (sa, sn) = (schedule.alpha_bar(t).sqrt(), schedule.noise_level(t));
            let zt = z0.values().zip_map(&noise, |a, n| sa * a + sn * n)?;
            let cond = if drop {
                Matrix::zeros(tokens[idx].rows(), tokens[idx].cols())
            } else {
                tokens[idx].clone()
            };
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let zv = tape.constant(zt);
            let cv = tape.constant(cond);
            let pred = ckpt.denoiser.forward_var(
                &mut tape,
                &mut binder,
                zv,
                z0.height(),
                z0.width(),
                cv,
                t,
                LoRAActivation::NONE,
                true,
            )?;
            let target = tape.constant(noise);
            let loss = tape.mse(pred, target);
            total += tape.value(loss).get(0, 0);
            let g = tape.backward(loss);
            binder.accumulate_into(&g, 1.0 / cfg.batch_size as f64, &mut grads);
        }
        apply_update(&mut ckpt, &mut opt, &grads)?;
        ckpt.step += 1;
        losses.push(mean_loss(total, cfg.batch_size));
    }
    ckpt.denoiser.freeze_base();
    ckpt.denoiser.inject_all(cfg.lora_rank, cfg.seeds.model ^ 0x10_4A5E)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}

/// Per-sample objective of an adapter stage, built on `tape`. Returns the
/// scalar whose gradient drives the update.
#[allow(clippy::too_many_arguments)]
fn stage_objective(
    tape: &mut Tape,
    binder: &mut Binder,
    ckpt: &Checkpoint,
    pipeline: &Pipeline,
    schedule: &NoiseSchedule,
    stage: u8,
    lq: &ImageTensor,
    hq: &ImageTensor,
    csd_seed: u64,
) -> Result<Var> {
    let cfg = &ckpt.config;
    let w = cfg.loss_weights;
    let [_, use_perc, use_csd, use_gram] = stage_terms(stage)?;
    let prep = pipeline.prepare(lq)?;
    let fv = tape.constant(prep.features.values().clone());
    let visual = adapt_var(tape, fv, &ckpt.adapter, binder, ckpt.adapter.trainable)?;
    let cond = ckpt.denoiser.cond_var(tape, binder, Some(visual), true)?;
    let (lh, lw) = (prep.latent.height(), prep.latent.width());
    let zl = tape.constant(prep.latent.values().clone());
    let eps = ckpt.denoiser.sr_forward_var(
        tape,
        binder,
        zl,
        lh,
        lw,
        cond,
        LoRAActivation::prefix(stage as usize),
        true,
    )?;
    let zp = tape.sub(zl, eps);
    let img = pipeline.codec.decode_var(tape, zp, lh, lw)?;
    let (h, wd) = (hq.height(), hq.width());
    let target = tape.constant(hq.to_matrix());
    let mse = tape.mse(img, target);
    let mut total = tape.scale(mse, w.mse);
    if use_perc {
        let targets = perceptual_targets(&pipeline.cond_encoder, hq)?;
        let p = perceptual_var(tape, &pipeline.cond_encoder, img, h, wd, &targets)?;
        let p = tape.scale(p, w.perceptual);
        total = tape.add(total, p);
    }
    if use_csd {
        let z_pred = LatentTensor::new(lh, lw, tape.value(zp).clone())?;
        let tokens = tape.value(cond).clone();
        let g = csd_loss_gradient(&z_pred, &tokens, schedule, &ckpt.denoiser, csd_seed)?;
        let s = csd_surrogate_var(tape, zp, &g)?;
        let s = tape.scale(s, w.csd);
        total = tape.add(total, s);
    }
    if use_gram {
        let gt = gram(&pipeline.gram_encoder.extract(hq)?, pipeline.gram_norm)?;
        let g = gram_loss_var(
            tape,
            &pipeline.gram_encoder,
            img,
            h,
            wd,
            gt.values(),
            pipeline.gram_norm,
        )?;
        let g = tape.scale(g, w.gram);
        total = tape.add(total, g);
    }
    Ok(total)
}

fn check_stage_order(stage: u8, ckpt: &Checkpoint) -> Result<()> {
    if !(1..=3).contains(&stage) {
        return Err(config_err!("adapter stages are 1, 2 and 3; got {stage}"));
    }
    if ckpt.stage + 1 != stage {
        return Err(config_err!(
            "stage {stage} must follow stage {}, but the checkpoint is at stage {}",
            stage - 1,
            ckpt.stage
        ));
    }
    if !ckpt.denoiser.base_frozen {
        return Err(config_err!("adapter stages need a pretrained, frozen base"));
    }
    Ok(())
}

pub fn train_stage(stage: u8, ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Checkpoint> {
    check_stage_order(stage, ckpt)?;
    let data = Dataset::build(cfg)?;
    Ok(train_stage_with(stage, ckpt, cfg, &data)?.checkpoint)
}

/// Mean validation metrics of one adapter prefix, as recorded in the history.
///
/// The objective is the sum of the Gram and perceptual distances. Given the
/// values at the start of a stage as `reference`, each term is divided by its
/// reference first, so the two distances count equally whatever their units.
fn evaluate_prefix(
    pipeline: &Pipeline,
    ckpt: &Checkpoint,
    val: &[Pair],
    act: LoRAActivation,
    stage: u8,
    reference: Option<(f64, f64)>,
) -> Result<ValidationRecord> {
    let report = evaluate_pairs(pipeline, val, |lq| pipeline.restore(ckpt, lq, act))?;
    let gd = report.aux("gram_distance").unwrap_or_default();
    let perc = report.aux("perceptual").unwrap_or_default();
    let objective = match reference {
        Some((g0, p0)) => relative(gd, g0) + relative(perc, p0),
        None => gd + perc,
    };
    Ok(ValidationRecord {
        stage,
        step: ckpt.step,
        psnr: report.psnr,
        ssim: report.ssim,
        gram_distance: gd,
        perceptual: perc,
        objective,
    })
}

fn relative(value: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        value / reference
    } else {
        value
    }
}

pub fn train_stage_with(
    stage: u8,
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    check_stage_order(stage, ckpt)?;
    cfg.validate()?;
    cfg.check_compatible(&ckpt.config)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut ckpt = ckpt.clone();
    ckpt.config = cfg.clone();
    set_stage_trainability(stage, &mut ckpt.denoiser, &mut ckpt.adapter)?;
    let pipeline = Pipeline::new(cfg)?;
    let schedule = NoiseSchedule::new(&cfg.denoiser.schedule)?;
    let mut rng = stage_rng(cfg, stage);
    let mut opt = Adam::new(cfg.learning_rates.for_stage(stage));
    let act = LoRAActivation::prefix(stage as usize);
    let max_steps = cfg.max_steps.for_stage(stage);
    let es = cfg.early_stopping;

    let mut best: Option<(f64, crate::denoiser::LoRAParamSet, u64)> = None;
    let mut reference = None;
    let mut stale = 0usize;
    if stage == 3 {
        let start = evaluate_prefix(&pipeline, &ckpt, &data.val, act, stage, None)?;
        reference = Some((start.gram_distance, start.perceptual));
        let rec = ValidationRecord {
            objective: relative(start.gram_distance, start.gram_distance)
                + relative(start.perceptual, start.perceptual),
            ..start
        };
        best = Some((rec.objective, gram_set(&ckpt)?.clone(), ckpt.step));
        ckpt.history.push(rec);
    }

    let mut losses = Vec::with_capacity(max_steps);
    for step in 1..=max_steps {
        let mut grads = GradMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..data.train.len());
            let deg_seed: u64 = rng.random();
            let csd_seed: u64 = rng.random();
            let hq = &data.train[idx];
            let lq = degrade(hq, &cfg.degradation, deg_seed)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let obj = stage_objective(
                &mut tape, &mut binder, &ckpt, &pipeline, &schedule, stage, &lq, hq, csd_seed,
            )?;
            total += tape.value(obj).get(0, 0);
            let g = tape.backward(obj);
            binder.accumulate_into(&g, 1.0 / cfg.batch_size as f64, &mut grads);
        }
        apply_update(&mut ckpt, &mut opt, &grads)?;
        ckpt.step += 1;
        losses.push(mean_loss(total, cfg.batch_size));

        if stage == 3 && (step % es.eval_every == 0 || step == max_steps) {
            let rec = evaluate_prefix(&pipeline, &ckpt, &data.val, act, stage, reference)?;
            let (best_obj, ..) = best.as_ref().expect("seeded before the loop");
            if rec.objective < *best_obj {
                best = Some((rec.objective, gram_set(&ckpt)?.clone(), ckpt.step));
                stale = 0;
            } else {
                stale += 1;
            }
            ckpt.history.push(rec);
            if stale >= es.patience {
                log::info!("early stop at stage-3 step {step}");
                break;
            }
        }
    }

    if let Some((_, set, _)) = best {
        *ckpt
            .denoiser
            .lora_set_mut(LoRAName::Gram)
            .expect("checked by set_stage_trainability") = set;
    } else {
        let rec = evaluate_prefix(&pipeline, &ckpt, &data.val, act, stage, None)?;
        ckpt.history.push(rec);
    }
    ckpt.stage = stage;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}

fn gram_set(ckpt: &Checkpoint) -> Result<&crate::denoiser::LoRAParamSet> {
    ckpt.denoiser
        .lora_set(LoRAName::Gram)
        .ok_or_else(|| config_err!("the gram adapter set is not injected"))
}

/// Averages full metric reports of `restore(lq)` against each HQ.
pub fn evaluate_pairs(
    pipeline: &Pipeline,
    pairs: &[Pair],
    mut restore: impl FnMut(&ImageTensor) -> Result<ImageTensor>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let reports = pairs
        .iter()
        .map(|p| pipeline.metrics(&restore(&p.lq)?, &p.hq))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

/// Validation metrics of a checkpoint. Stage-3 checkpoints run guided
/// inference at `scales`; earlier stages run their own adapter prefix and
/// ignore the scales.
pub fn validate(ckpt: &Checkpoint, val: &[Pair], scales: &GuidanceScales) -> Result<MetricReport> {
    let pipeline = Pipeline::new(&ckpt.config)?;
    if ckpt.stage == 3 {
        let mode = ckpt.config.guidance_mode;
        evaluate_pairs(&pipeline, val, |lq| infer(&pipeline, lq, scales, mode, ckpt))
    } else {
        let act = LoRAActivation::prefix(ckpt.stage as usize);
        evaluate_pairs(&pipeline, val, |lq| pipeline.restore(ckpt, lq, act))
    }
}

#[cfg(test)]
mod tests;
