use gramsr_core::codec::SpaceToDepth;
use gramsr_core::degrade::{degrade, DegradationConfig};
use gramsr_core::image::{bicubic_upscale, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    ImageTensor::from_u8(h, w, 3, &bytes).unwrap()
}

#[test]
fn decode_encode_is_identity_on_100_images() {
    let codec = SpaceToDepth::default();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let h = 4 * rng.random_range(1..17);
        let w = 4 * rng.random_range(1..17);
        let img = random_image(&mut rng, h, w);
        assert_eq!(codec.decode(&codec.encode(&img).unwrap()).unwrap(), img);
    }
}

/// Values k/256: the bicubic taps at x4 are dyadic too, so every residual is
/// computed without rounding.
fn dyadic_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |_, _, _| f64::from(rng.random_range(0u32..=256)) / 256.0).unwrap()
}

#[test]
fn oracle_residual_reconstructs_hq_on_100_images() {
    let codec = SpaceToDepth::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..100 {
        let hq = dyadic_image(&mut rng, 32, 32);
        let lq = dyadic_image(&mut rng, 8, 8);
        let up = bicubic_upscale(&lq, 4).unwrap();
        let z_l = codec.encode(&up).unwrap();
        let eps = z_l.sub(&codec.encode(&hq).unwrap()).unwrap();
        let restored = codec.decode(&z_l.sub(&eps).unwrap()).unwrap();
        assert_eq!(restored, hq, "image {i}");
    }
}

#[test]
fn oracle_residual_on_degraded_pairs_is_exact_in_8_bit() {
    let codec = SpaceToDepth::default();
    let cfg = DegradationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..100 {
        let hq = random_image(&mut rng, 32, 32);
        let lq = degrade(&hq, &cfg, i).unwrap();
        let z_l = codec.encode(&bicubic_upscale(&lq, 4).unwrap()).unwrap();
        let eps = z_l.sub(&codec.encode(&hq).unwrap()).unwrap();
        let restored = codec.decode(&z_l.sub(&eps).unwrap()).unwrap();
        assert_eq!(restored.to_u8(), hq.to_u8(), "image {i}");
        let worst = restored
            .data()
            .iter()
            .zip(hq.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= f64::EPSILON, "image {i}: {worst}");
    }
}
