use asp_vision::optics::{default_tile, make_filter_bank, FilterBank, KernelGeometry};
use asp_vision::sensor::{
    add_noise, capture, convolve2d, correlate2d, dequantize, quantize_stack, Border, CaptureSettings, FeatureStack,
    Image,
};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bank() -> FilterBank {
    make_filter_bank(&default_tile(), KernelGeometry::DEFAULT).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Zero-padded correlation written out independently of the library loop.
fn brute_force(img: &[f64], h: usize, w: usize, ker: &[f64], k: usize) -> Vec<f64> {
    let o = (k / 2) as i64;
    let mut out = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut acc = 0.0;
            for i in 0..k as i64 {
                for j in 0..k as i64 {
                    let (y, x) = (r + i - o, c + j - o);
                    let px = if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                        img[(y * w as i64 + x) as usize]
                    } else {
                        0.0
                    };
                    acc += ker[(i * k as i64 + j) as usize] * px;
                }
            }
            out[(r * w as i64 + c) as usize] = acc;
        }
    }
    out
}

#[test]
fn six_by_six_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ker: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = correlate2d(&img, 6, 6, &ker, 3, Border::ZeroPad).unwrap();
    for (a, b) in got.values.iter().zip(brute_force(&img, 6, 6, &ker, 3)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn capture_planes_match_single_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 28, 28);
    let bank = bank();
    let stack = capture(&img, &bank, &CaptureSettings::default()).unwrap();
    assert_eq!((stack.height, stack.width, stack.depth()), (28, 28, 12));
    for (plane, kernel) in stack.planes.iter().zip(&bank.kernels) {
        assert_eq!(plane, &convolve2d(&img, kernel, Border::ZeroPad).unwrap().values);
    }
}

#[test]
fn empirical_snr_matches_request() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 128, 128);
    let noisy = add_noise(&img, 12.0, 99).unwrap();
    let n = img.values().len() as f64;
    let diffs: Vec<f64> = noisy.values().iter().zip(img.values()).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let snr = 10.0 * (img.mean_square() / var).log10();
    assert!((snr - 12.0).abs() <= 0.5, "measured {snr} dB");
}

#[test]
fn output_snr_is_monotone_in_requested_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = random_image(&mut rng, 32, 32);
    let bank = bank();
    let clean = capture(&img, &bank, &CaptureSettings::default()).unwrap();
    let signal: f64 = clean.planes.iter().flatten().map(|v| v * v).sum();
    let mut previous = f64::NEG_INFINITY;
    for snr_db in [0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 20.0, 28.0, 40.0] {
        let mut noise = 0.0;
        for seed in 0..20 {
            let settings = CaptureSettings { snr_db: Some(snr_db), seed, border: Border::ZeroPad };
            let noisy = capture(&img, &bank, &settings).unwrap();
            noise += noisy
                .planes
                .iter()
                .flatten()
                .zip(clean.planes.iter().flatten())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        let measured = 10.0 * (20.0 * signal / noise).log10();
        assert!(measured >= previous, "{snr_db} dB: {measured} < {previous}");
        previous = measured;
    }
}

#[test]
fn max_magnitude_maps_to_full_scale() {
    let stack = FeatureStack { height: 1, width: 3, planes: vec![vec![-2.0, 0.5, 1.0]], kernel_size: 0, snr_db: None };
    let q = quantize_stack(&stack, 8);
    assert_eq!(q.planes[0][0], -127);
    assert!((q.scale() - 2.0 / 127.0).abs() < 1e-15);
}

fn image_pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (7usize..14, 7usize..14)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), vec(0.0f64..1.0, h * w), vec(0.0f64..1.0, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn capture_is_linear((h, w, x, y) in image_pair(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let bank = bank();
        let s = CaptureSettings::default();
        let img1 = Image::new(h, w, x.clone()).unwrap();
        let img2 = Image::new(h, w, y.clone()).unwrap();
        let mix = Image::from_signal(h, w, x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let c1 = capture(&img1, &bank, &s).unwrap();
        let c2 = capture(&img2, &bank, &s).unwrap();
        let cm = capture(&mix, &bank, &s).unwrap();
        for d in 0..bank.len() {
            for i in 0..h * w {
                let expected = a * c1.planes[d][i] + b * c2.planes[d][i];
                prop_assert!((cm.planes[d][i] - expected).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn valid_capture_is_shift_equivariant(h in 8usize..14, w in 8usize..14, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wide: Vec<f64> = (0..h * (w + 1)).map(|_| rng.random()).collect();
        let crop = |from: usize| -> Image {
            let v = (0..h).flat_map(|r| wide[r * (w + 1) + from..r * (w + 1) + from + w].to_vec()).collect();
            Image::new(h, w, v).unwrap()
        };
        let settings = CaptureSettings { border: Border::Valid, ..Default::default() };
        let bank = bank();
        let left = capture(&crop(0), &bank, &settings).unwrap();
        let right = capture(&crop(1), &bank, &settings).unwrap();
        let ow = left.width;
        for d in 0..bank.len() {
            for r in 0..left.height {
                for c in 0..ow - 1 {
                    prop_assert_eq!(right.planes[d][r * ow + c], left.planes[d][r * ow + c + 1]);
                }
            }
        }
    }

    #[test]
    fn quantization_error_is_half_a_step(values in vec(-50.0f64..50.0, 1..200), bits in 2u32..=8) {
        let n = values.len();
        let stack = FeatureStack { height: 1, width: n, planes: vec![values.clone()], kernel_size: 0, snr_db: None };
        let q = quantize_stack(&stack, bits);
        let back = dequantize(&q);
        for (a, b) in back.planes[0].iter().zip(&values) {
            prop_assert!((a - b).abs() <= q.scale() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn noise_is_reproducible(seed in any::<u64>(), snr in -5.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 8, 8);
        prop_assert_eq!(add_noise(&img, snr, seed).unwrap(), add_noise(&img, snr, seed).unwrap());
    }
}
