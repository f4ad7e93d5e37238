use glab::metrics::{mse, pmm, psnr, ssim, Psnr};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ramp(n: usize, mul: usize, modulo: usize, div: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * mul) % modulo) as f64 / div).collect()
}

// Reference values from scikit-image `structural_similarity` with
// win_size=7, uniform window, sample covariance, data_range=1.
#[test]
fn ssim_matches_reference_grey() {
    let x = ramp(120, 37, 101, 100.0);
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v + 0.1 * (i as f64).sin()).clamp(0.0, 1.0)).collect();
    let s = ssim(&x, &y, [1, 12, 10]).unwrap();
    assert!(!s.global_fallback);
    assert!((s.value - 0.9705617268014075).abs() < 1e-12, "{}", s.value);
    assert!((psnr(&x, &y).unwrap().value() - 23.312008023142653).abs() < 1e-10);
}

#[test]
fn ssim_matches_reference_colour() {
    let x = ramp(243, 13, 17, 16.0);
    let y: Vec<f64> = x.iter().map(|v| (v * 0.8 + 0.05).clamp(0.0, 1.0)).collect();
    let s = ssim(&x, &y, [3, 9, 9]).unwrap();
    assert!((s.value - 0.9704000732700767).abs() < 1e-12, "{}", s.value);
}

#[test]
fn psnr_of_identical_inputs_is_infinite() {
    let x = ramp(30, 7, 11, 10.0);
    assert_eq!(psnr(&x, &x).unwrap(), Psnr::Infinite);
    assert_eq!(Psnr::Infinite.to_string(), "inf");
}

#[test]
fn psnr_strictly_decreases_with_noise() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..3 * 32 * 32).map(|_| r.random::<f64>()).collect();
    let dir: Vec<f64> = (0..x.len()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let values: Vec<f64> = [0.01, 0.05, 0.1, 0.2]
        .iter()
        .map(|m| psnr(&x, &x.iter().zip(&dir).map(|(a, d)| a + m * d).collect::<Vec<_>>()).unwrap().value())
        .collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
}

#[test]
fn tiny_images_use_one_global_window() {
    let x = ramp(16, 3, 7, 6.0);
    let s = ssim(&x, &x, [1, 4, 4]).unwrap();
    assert!(s.global_fallback);
    assert!((s.value - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_reject_mismatched_shapes() {
    assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    assert!(mse(&[], &[]).is_err());
    assert!(ssim(&[0.0; 10], &[0.0; 10], [1, 3, 3]).is_err());
    assert!(pmm(0.5, 0.0).is_err());
    assert!((pmm(0.45, 0.5).unwrap() - 90.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ssim_is_at_most_one_and_one_on_equality(seed in 0u64..10_000, amp in 0.0f64..0.5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2 * 8 * 8).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + amp * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
        let s = ssim(&x, &y, [2, 8, 8]).unwrap().value;
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((ssim(&x, &x, [2, 8, 8]).unwrap().value - 1.0).abs() < 1e-9);
        if x != y {
            prop_assert!(s < 1.0);
        }
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(a in proptest::collection::vec(0.0f64..1.0, 1..50), shift in -1.0f64..1.0) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let m = mse(&a, &b).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m, mse(&b, &a).unwrap());
        prop_assert!((m - shift * shift).abs() < 1e-12);
    }
}
