use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::denoiser::LoRAName;
use crate::testutil::tiny_config;
use crate::trainer::{init_checkpoint, pretrain_with, train_stage_with, Dataset, RunConfig};

fn lq(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.random::<f64>()).unwrap()
}

/// Stage-3 checkpoint whose adapter sets hold seeded nonzero weights.
fn random_stage3(cfg: &RunConfig, zero_b: bool) -> Checkpoint {
    let mut ckpt = init_checkpoint(cfg).unwrap();
    ckpt.denoiser.freeze_base();
    ckpt.denoiser.inject_all(cfg.lora_rank, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    if !zero_b {
        for set in &mut ckpt.denoiser.lora {
            for pair in set.targets.values_mut() {
                pair.b = Matrix::from_fn(pair.b.rows(), pair.b.cols(), |_, _| {
                    rng.random_range(-0.3..0.3)
                });
            }
        }
    }
    ckpt.stage = 3;
    ckpt
}

fn passes_for(ckpt: &Checkpoint, pipeline: &Pipeline, seed: u64) -> (Passes, Matrix) {
    let prep = pipeline.prepare(&lq(seed)).unwrap();
    let tokens = pipeline.tokens(ckpt, &prep.features).unwrap();
    (compute_passes(&prep.latent, &tokens, ckpt).unwrap(), tokens)
}

/// Forward pass of a model that only holds the first `k` adapter sets, all active.
fn prefix_oracle(ckpt: &Checkpoint, pipeline: &Pipeline, seed: u64, k: usize) -> Matrix {
    let mut model = ckpt.denoiser.clone();
    model.lora.retain(|s| s.name.index() < k);
    let prep = pipeline.prepare(&lq(seed)).unwrap();
    let tokens = pipeline.tokens(ckpt, &prep.features).unwrap();
    model
        .predict(&prep.latent, &tokens, LoRAActivation::ALL)
        .unwrap()
        .into_values()
}

fn is_zero(m: &Matrix) -> bool {
    m.data().iter().all(|&v| v == 0.0)
}

#[test]
fn zero_adapters_give_zero_deltas() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, true);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 1);
    let r = passes.deltas(GuidanceMode::Residual).unwrap();
    assert!(is_zero(&r.pix) && is_zero(&r.sem) && is_zero(&r.gram));
    let l = passes.deltas(GuidanceMode::Literal).unwrap();
    assert!(l.pix.bit_eq(&passes.eps[0]));
    assert!(is_zero(&l.sem) && is_zero(&l.gram));
}

#[test]
fn passes_match_prefix_recomputation() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 2);
    for k in 0..4 {
        assert!(passes.eps[k].bit_eq(&prefix_oracle(&ckpt, &pipeline, 2, k)), "pass {k}");
    }
    let d = passes.deltas(GuidanceMode::Residual).unwrap();
    assert!(!is_zero(&d.pix) && !is_zero(&d.sem) && !is_zero(&d.gram));
}

#[test]
fn trained_checkpoint_deltas_match_recomputation() {
    let mut cfg = tiny_config();
    // a stage-3 evaluation cadence that never restores the initial texture set
    cfg.early_stopping.eval_every = 100;
    let data = Dataset::build(&cfg).unwrap();
    let mut ckpt = pretrain_with(&cfg, &data).unwrap().checkpoint;
    for stage in 1..=3 {
        ckpt = train_stage_with(stage, &ckpt, &cfg, &data).unwrap().checkpoint;
    }
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 3);
    let eps: Vec<Matrix> = (0..4).map(|k| prefix_oracle(&ckpt, &pipeline, 3, k)).collect();
    for mode in [GuidanceMode::Residual, GuidanceMode::Literal] {
        let d = passes.deltas(mode).unwrap();
        let pix = match mode {
            GuidanceMode::Residual => eps[1].sub(&eps[0]).unwrap(),
            GuidanceMode::Literal => eps[1].clone(),
        };
        assert!(d.pix.bit_eq(&pix));
        assert!(d.sem.bit_eq(&eps[2].sub(&eps[1]).unwrap()));
        assert!(d.gram.bit_eq(&eps[3].sub(&eps[2]).unwrap()));
    }
}

#[test]
fn unit_and_zero_scales_are_exact() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 4);
    let [e0, _, _, eg] = &passes.eps;
    let one = GuidanceScales::new(1.0, 1.0, 1.0);
    let zero = GuidanceScales::new(0.0, 0.0, 0.0);
    assert!(passes.compose(&one, GuidanceMode::Residual).unwrap().bit_eq(eg));
    assert!(passes
        .compose(&one, GuidanceMode::Literal)
        .unwrap()
        .bit_eq(&e0.add(eg).unwrap()));
    for mode in [GuidanceMode::Residual, GuidanceMode::Literal] {
        assert!(passes.compose(&zero, mode).unwrap().bit_eq(e0));
    }
}

#[test]
fn single_scale_isolates_one_delta() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 5);
    for mode in [GuidanceMode::Residual, GuidanceMode::Literal] {
        let d = passes.deltas(mode).unwrap();
        for (i, delta) in d.as_array().into_iter().enumerate() {
            for lambda in [0.3, -0.7, 1.75] {
                let mut s = [0.0; 3];
                s[i] = lambda;
                let got = passes
                    .compose(&GuidanceScales::new(s[0], s[1], s[2]), mode)
                    .unwrap();
                let mut want = passes.eps[0].clone();
                want.add_assign(&delta.scale(lambda));
                assert!(got.bit_eq(&want), "{mode:?} delta {i} at {lambda}");
            }
        }
    }
}

#[test]
fn halving_texture_scale_halves_its_contribution() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let (passes, _) = passes_for(&ckpt, &pipeline, 6);
    let gram = passes.deltas(GuidanceMode::Residual).unwrap().gram;
    for lambda in [0.25, 0.5, 0.75, 1.5] {
        let got = passes
            .compose(&GuidanceScales::new(1.0, 1.0, lambda), GuidanceMode::Residual)
            .unwrap();
        let mut want = passes.eps[2].clone();
        want.add_assign(&gram.scale(lambda));
        assert!(got.bit_eq(&want));
        let half = gram.scale(lambda / 2.0);
        assert!(half.scale(2.0).bit_eq(&gram.scale(lambda)));
    }
}

#[test]
fn infer_endpoints_match_restore() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let x = lq(7);
    let zero = infer(&pipeline, &x, &GuidanceScales::new(0.0, 0.0, 0.0), GuidanceMode::Literal, &ckpt)
        .unwrap();
    assert_eq!(zero, pipeline.restore(&ckpt, &x, LoRAActivation::NONE).unwrap());
    let full = infer(&pipeline, &x, &GuidanceScales::default(), GuidanceMode::Residual, &ckpt).unwrap();
    assert_eq!(full, pipeline.restore(&ckpt, &x, LoRAActivation::ALL).unwrap());
    assert_eq!(full.shape(), (32, 32, 3));
    let gray = ImageTensor::filled(8, 8, 1, 0.4).unwrap();
    assert_eq!(
        infer(&pipeline, &gray, &GuidanceScales::default(), GuidanceMode::Residual, &ckpt)
            .unwrap()
            .shape(),
        (32, 32, 3)
    );
    let bad = GuidanceScales::new(f64::NAN, 1.0, 1.0);
    assert!(matches!(
        infer(&pipeline, &x, &bad, GuidanceMode::Residual, &ckpt),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        infer(&pipeline, &lq(1).crop(0, 0, 5, 5).unwrap(), &GuidanceScales::default(), GuidanceMode::Residual, &ckpt),
        Err(Error::Size(_))
    ));
}

#[test]
fn wrong_stage_is_rejected() {
    let cfg = tiny_config();
    let mut ckpt = random_stage3(&cfg, false);
    ckpt.stage = 2;
    let pipeline = Pipeline::new(&cfg).unwrap();
    let r = infer(&pipeline, &lq(1), &GuidanceScales::default(), GuidanceMode::Residual, &ckpt);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = sweep(&pipeline, &lq(1), &GuidanceScales::texture_grid(), GuidanceMode::Residual, &ckpt, None);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn sweep_rows_and_csv() {
    let cfg = tiny_config();
    let ckpt = random_stage3(&cfg, false);
    let pipeline = Pipeline::new(&cfg).unwrap();
    let x = lq(8);
    let gt = ImageTensor::from_fn(32, 32, 3, |y, xx, c| ((y + xx + c) % 9) as f64 / 9.0).unwrap();
    let mode = GuidanceMode::Residual;

    let point = GuidanceScales::new(1.0, 0.5, 0.25);
    let single = sweep(&pipeline, &x, &[point], mode, &ckpt, Some(&gt)).unwrap();
    assert_eq!(single.rows.len(), 1);
    let direct = pipeline
        .metrics(&infer(&pipeline, &x, &point, mode, &ckpt).unwrap(), &gt)
        .unwrap();
    let row = &single.rows[0];
    assert_eq!(row.psnr, Some(direct.psnr));
    assert_eq!(row.ssim, Some(direct.ssim));
    assert_eq!(Some(row.gram_distance), direct.aux("gram_distance"));
    assert_eq!(row.perceptual, direct.aux("perceptual"));

    let dup = sweep(&pipeline, &x, &[point, point], mode, &ckpt, Some(&gt)).unwrap();
    assert_eq!(dup.rows[0], dup.rows[1]);

    let grid = GuidanceScales::texture_grid();
    assert_eq!(
        grid.iter().map(|s| s.lambda_gram).collect::<Vec<_>>(),
        [0.25, 0.5, 0.75, 1.0]
    );
    assert!(grid.iter().all(|s| s.lambda_pix == 1.0 && s.lambda_sem == 1.0));
    let report = sweep(&pipeline, &x, &grid, mode, &ckpt, None).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.psnr.is_none() && r.perceptual.is_none()));
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,1,0.25,,,"));
    assert!(lines[4].ends_with(','));

    assert!(matches!(
        sweep(&pipeline, &x, &[], mode, &ckpt, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn mode_parsing() {
    assert_eq!("literal".parse::<GuidanceMode>().unwrap(), GuidanceMode::Literal);
    assert_eq!("residual".parse::<GuidanceMode>().unwrap(), GuidanceMode::Residual);
    assert!("both".parse::<GuidanceMode>().is_err());
    assert_eq!(GuidanceMode::default(), GuidanceMode::Residual);
    assert_eq!(GuidanceScales::default().as_array(), [1.0; 3]);
}

fn fixture() -> &'static (Passes, Passes) {
    static CELL: std::sync::OnceLock<(Passes, Passes)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = tiny_config();
        let ckpt = random_stage3(&cfg, false);
        let pipeline = Pipeline::new(&cfg).unwrap();
        (passes_for(&ckpt, &pipeline, 11).0, passes_for(&ckpt, &pipeline, 12).0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Composition is linear in the scales: base term plus scaled deltas.
    #[test]
    fn composition_is_linear(
        a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, literal in any::<bool>()
    ) {
        let mode = if literal { GuidanceMode::Literal } else { GuidanceMode::Residual };
        for passes in [&fixture().0, &fixture().1] {
            let d = passes.deltas(mode).unwrap();
            let got = passes.compose(&GuidanceScales::new(a, b, c), mode).unwrap();
            let mut want = passes.eps[0].clone();
            for (l, delta) in [a, b, c].into_iter().zip(d.as_array()) {
                want.add_assign(&delta.scale(l));
            }
            prop_assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    /// Scales are independent: moving one changes the result by that delta alone.
    #[test]
    fn scales_act_independently(a in -2.0f64..2.0, b in -2.0f64..2.0, step in -1.0f64..1.0) {
        let passes = &fixture().0;
        let mode = GuidanceMode::Residual;
        let d = passes.deltas(mode).unwrap();
        let lo = passes.compose(&GuidanceScales::new(a, b, 0.1), mode).unwrap();
        let hi = passes.compose(&GuidanceScales::new(a, b, 0.1 + step), mode).unwrap();
        let diff = hi.sub(&lo).unwrap();
        prop_assert!(diff.max_abs_diff(&d.gram.scale(step)) < 1e-12);
    }
}

#[test]
fn lora_name_order_drives_prefixes() {
    assert_eq!(
        LoRAName::ALL.map(|n| n.index()),
        [0, 1, 2]
    );
}
