use super::*;
use crate::codec::SpaceToDepth;
use crate::denoiser::ParamGroup;
use crate::testutil::tiny_config as tiny;
use crate::image::{area_downsample, PSNR_CAP_DB};

fn run_all(cfg: &RunConfig) -> Vec<Checkpoint> {
    let data = Dataset::build(cfg).unwrap();
    let mut out = vec![pretrain_with(cfg, &data).unwrap().checkpoint];
    for stage in 1..=3 {
        let next = train_stage_with(stage, out.last().unwrap(), cfg, &data)
            .unwrap()
            .checkpoint;
        out.push(next);
    }
    out
}

#[test]
fn pretrain_freezes_base_and_injects_sets() {
    let cfg = tiny();
    let ckpt = pretrain_base(&cfg).unwrap();
    assert_eq!(ckpt.stage, 0);
    assert_eq!(ckpt.step, cfg.max_steps.pretrain as u64);
    assert!(ckpt.denoiser.base_frozen);
    assert!(!ckpt.denoiser.base_trainable);
    for name in LoRAName::ALL {
        let set = ckpt.denoiser.lora_set(name).unwrap();
        assert_eq!(set.rank, cfg.lora_rank);
        assert!(set.targets.values().all(|p| p.b.data().iter().all(|&v| v == 0.0)));
    }
    // the base actually moved away from its initialization
    let init = init_checkpoint(&cfg).unwrap();
    assert_ne!(
        init.group_snapshot(ParamGroup::Base),
        ckpt.group_snapshot(ParamGroup::Base)
    );
}

#[test]
fn pretrain_loss_falls_on_one_image() {
    let mut cfg = tiny();
    cfg.batch_size = 1;
    cfg.max_steps.pretrain = 200;
    cfg.cond_dropout = 0.0;
    let data = Dataset {
        train: synthetic_corpus(1, 32, 5).unwrap(),
        val: Vec::new(),
    };
    let losses = pretrain_with(&cfg, &data).unwrap().losses;
    assert_eq!(losses.len(), 200);
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = window(&losses[..50]);
    let last = window(&losses[150..]);
    assert!(last < first, "first window {first}, last window {last}");
}

#[test]
fn empty_corpus_is_data_error() {
    let mut cfg = tiny();
    cfg.data.synthetic_train = 0;
    assert!(matches!(pretrain_base(&cfg), Err(Error::Data(_))));
}

#[test]
fn stage_order_is_enforced() {
    let cfg = tiny();
    let data = Dataset::build(&cfg).unwrap();
    let s0 = pretrain_with(&cfg, &data).unwrap().checkpoint;
    assert!(matches!(train_stage_with(2, &s0, &cfg, &data), Err(Error::Config(_))));
    assert!(matches!(train_stage_with(4, &s0, &cfg, &data), Err(Error::Config(_))));
    let s1 = train_stage_with(1, &s0, &cfg, &data).unwrap().checkpoint;
    assert_eq!(s1.stage, 1);
    assert!(matches!(train_stage(3, &s1, &cfg), Err(Error::Config(_))));
    // an unfrozen base cannot enter the adapter stages
    let mut raw = init_checkpoint(&cfg).unwrap();
    raw.denoiser.inject_all(cfg.lora_rank, 1).unwrap();
    assert!(matches!(train_stage_with(1, &raw, &cfg, &data), Err(Error::Config(_))));
}

#[test]
fn incompatible_config_is_rejected() {
    let cfg = tiny();
    let data = Dataset::build(&cfg).unwrap();
    let s0 = pretrain_with(&cfg, &data).unwrap().checkpoint;
    let mut other = cfg.clone();
    other.lora_rank = 2;
    assert!(matches!(train_stage_with(1, &s0, &other, &data), Err(Error::Config(_))));
}

#[test]
fn frozen_groups_are_byte_identical() {
    let cfg = tiny();
    let ckpts = run_all(&cfg);
    let frozen: [&[ParamGroup]; 3] = [
        &[ParamGroup::Base, ParamGroup::Sem, ParamGroup::Gram],
        &[ParamGroup::Base, ParamGroup::Pix, ParamGroup::Gram],
        &[ParamGroup::Base, ParamGroup::Pix, ParamGroup::Sem, ParamGroup::Adapter],
    ];
    let trained = [ParamGroup::Pix, ParamGroup::Sem, ParamGroup::Gram];
    for (i, groups) in frozen.iter().enumerate() {
        let (before, after) = (&ckpts[i], &ckpts[i + 1]);
        for g in *groups {
            assert_eq!(
                before.group_snapshot(*g),
                after.group_snapshot(*g),
                "stage {} changed {g:?}",
                i + 1
            );
        }
        if i < 2 {
            assert_ne!(before.group_snapshot(trained[i]), after.group_snapshot(trained[i]));
        }
    }
}

#[test]
fn full_runs_are_byte_deterministic() {
    let cfg = tiny();
    let a = run_all(&cfg);
    let b = run_all(&cfg);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
}

#[test]
fn early_stopping_keeps_the_best_evaluation() {
    let mut cfg = tiny();
    cfg.max_steps.stage3 = 6;
    cfg.learning_rates.stage3 = 5e-2;
    let ckpts = run_all(&cfg);
    let s3 = &ckpts[3];
    let records: Vec<&ValidationRecord> = s3.history.iter().filter(|r| r.stage == 3).collect();
    assert!(records.len() >= 2);
    let best = records
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .unwrap();
    assert_eq!(records[0].objective, 2.0);
    let data = Dataset::build(&cfg).unwrap();
    let pipeline = Pipeline::new(&cfg).unwrap();
    let start = (records[0].gram_distance, records[0].perceptual);
    let rec = evaluate_prefix(&pipeline, s3, &data.val, LoRAActivation::ALL, 3, Some(start)).unwrap();
    assert_eq!(rec.objective, best.objective);
    assert_eq!(rec.gram_distance, best.gram_distance);
}

fn rebuild(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[20..20 + mlen]).unwrap();
    edit(&mut manifest);
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[20 + mlen..]);
    out
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let cfg = tiny();
    let ckpts = run_all(&cfg);
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in ckpts.iter().enumerate() {
        let path = dir.path().join(format!("s{i}.ckpt"));
        save_checkpoint(c, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(&loaded, c);
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
    let path = dir.path().join("s3.ckpt");
    assert!(load_checkpoint_with_stride(&path, 4).is_ok());
    assert!(matches!(load_checkpoint_with_stride(&path, 2), Err(Error::Config(_))));
}

#[test]
fn tampered_containers_are_corrupt() {
    let cfg = tiny();
    let bytes = init_checkpoint(&cfg).unwrap().to_bytes();
    // unchanged manifest rebuilt through the same path still loads
    assert!(Checkpoint::from_bytes(&rebuild(&bytes, |_| {})).is_ok());

    let shape = rebuild(&bytes, |m| {
        let s = &mut m["tensors"][0]["shape"];
        s[0] = serde_json::json!(s[0].as_u64().unwrap() + 1);
    });
    let stride = rebuild(&bytes, |m| m["stride"] = serde_json::json!(2));
    let stage = rebuild(&bytes, |m| m["stage"] = serde_json::json!(7));
    let dropped = rebuild(&bytes, |m| {
        m["tensors"].as_array_mut().unwrap().pop();
    });
    let mut payload = bytes.clone();
    *payload.last_mut().unwrap() ^= 1;
    let mut magic = bytes.clone();
    magic[0] = b'X';
    for (what, bad) in [
        ("shape", shape),
        ("stride", stride),
        ("stage", stage),
        ("dropped tensor", dropped),
        ("payload", payload),
        ("magic", magic),
        ("truncated", bytes[..bytes.len() - 8].to_vec()),
        ("empty", Vec::new()),
    ] {
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt(_))), "{what}");
    }
}

/// Dyadic HQ images and their area-downsampled LQ; with these every value in
/// the residual identity is exactly representable.
fn dyadic_pairs(n: usize) -> Vec<Pair> {
    (0..n)
        .map(|k| {
            let hq = ImageTensor::from_fn(32, 32, 3, |y, x, c| {
                ((y * 7 + x * 3 + c * 11 + k * 5) % 256) as f64 / 256.0
            })
            .unwrap();
            let lq = area_downsample(&hq, 4).unwrap();
            Pair { lq, hq }
        })
        .collect()
}

#[test]
fn perfect_restoration_stub_reaches_the_cap() {
    let cfg = tiny();
    let pipeline = Pipeline::new(&cfg).unwrap();
    let codec = SpaceToDepth::default();
    let pairs = dyadic_pairs(3);
    let report = evaluate_pairs(&pipeline, &pairs, |lq| {
        let pair = pairs.iter().find(|p| &p.lq == lq).unwrap();
        let prep = pipeline.prepare(lq)?;
        let eps = prep.latent.sub(&codec.encode(&pair.hq)?)?;
        pipeline.finish(&prep.latent, eps.values())
    })
    .unwrap();
    assert_eq!(report.psnr, PSNR_CAP_DB);
    assert_eq!(report.ssim, 1.0);
    assert_eq!(report.aux("gram_distance"), Some(0.0));
    assert_eq!(report.aux("perceptual"), Some(0.0));
}

#[test]
fn validation_mean_matches_loop_oracle() {
    let cfg = tiny();
    let data = Dataset::build(&cfg).unwrap();
    let ckpt = pretrain_with(&cfg, &data).unwrap().checkpoint;
    let pipeline = Pipeline::new(&cfg).unwrap();
    let report = validate(&ckpt, &data.val, &GuidanceScales::default()).unwrap();
    let (mut p, mut s, mut g) = (0.0, 0.0, 0.0);
    for pair in &data.val {
        let sr = pipeline.restore(&ckpt, &pair.lq, LoRAActivation::NONE).unwrap();
        let r = pipeline.metrics(&sr, &pair.hq).unwrap();
        p += r.psnr;
        s += r.ssim;
        g += r.aux("gram_distance").unwrap();
    }
    let n = data.val.len() as f64;
    assert!((report.psnr - p / n).abs() < 1e-12);
    assert!((report.ssim - s / n).abs() < 1e-12);
    assert!((report.aux("gram_distance").unwrap() - g / n).abs() < 1e-15);
    assert_eq!(report, validate(&ckpt, &data.val, &GuidanceScales::default()).unwrap());
    assert!(matches!(
        validate(&ckpt, &[], &GuidanceScales::default()),
        Err(Error::Data(_))
    ));
}
