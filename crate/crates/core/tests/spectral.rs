mod common;

use common::dft::{max_rel_dev, naive_dft};
use ndarray::Array2;
use nimbus_core::spectral::{cutoff_for_ratio, fft2, field_profile, lowpass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0))
}

#[test]
fn fft_matches_naive_dft() {
    for (n, (h, w)) in [(8, 8), (12, 12), (16, 16), (64, 64), (12, 8), (9, 15)]
        .into_iter()
        .enumerate()
    {
        let x = random(h, w, n as u64);
        let dev = max_rel_dev(&fft2(x.view()).unwrap().coeffs, &naive_dft(&x));
        assert!(dev < 1e-6, "{h}x{w}: {dev:e}");
    }
}

#[test]
fn parseval() {
    for n in [8, 12, 16, 64] {
        let x = random(n, n, 100 + n as u64);
        let lhs: f64 = x.iter().map(|v| v * v).sum();
        let rhs = fft2(x.view())
            .unwrap()
            .coeffs
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            / (n * n) as f64;
        assert!(((lhs - rhs) / lhs).abs() < 1e-5);
    }
}

#[test]
fn white_noise_amplitude_is_flat() {
    let seeds = 32;
    let mut mean_amp = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((64, 64), || {
            rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let p = field_profile(x.view()).unwrap();
        if mean_amp.is_empty() {
            mean_amp = vec![0.0; p.amplitude.len()];
        }
        for (m, a) in mean_amp.iter_mut().zip(&p.amplitude) {
            *m += a / seeds as f64;
        }
    }
    // Interior shells: skip DC and the sparse corner shells beyond r = 1.
    let interior = &mean_amp[1..32];
    let mu = interior.iter().sum::<f64>() / interior.len() as f64;
    let sd =
        (interior.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / interior.len() as f64).sqrt();
    assert!(sd / mu < 0.2, "cv {}", sd / mu);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cumulative_energy_is_monotone(seed in 0u64..1000, h in 4usize..20, w in 4usize..20) {
        let p = field_profile(random(h, w, seed).view()).unwrap();
        prop_assert!(p.cumulative.windows(2).all(|e| e[0] <= e[1]));
        prop_assert!((p.cumulative.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cutoff_is_monotone_in_gamma(seed in 0u64..1000, g1 in 0.01f64..1.0, g2 in 0.01f64..1.0) {
        let p = field_profile(random(16, 16, seed).view()).unwrap();
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(cutoff_for_ratio(&p, lo).unwrap() <= cutoff_for_ratio(&p, hi).unwrap());
    }

    #[test]
    fn lowpass_is_a_linear_projection(seed in 0u64..1000, r in 0.0f64..1.5, a in -3.0f64..3.0) {
        let x = random(12, 16, seed);
        let y = random(12, 16, seed + 1);
        let once = lowpass(x.view(), r).unwrap();
        let twice = lowpass(once.view(), r).unwrap();
        prop_assert!(once.iter().zip(&twice).all(|(p, q)| (p - q).abs() < 1e-9));
        let combo = &x * a + &y;
        let lhs = lowpass(combo.view(), r).unwrap();
        let rhs = &once * a + &lowpass(y.view(), r).unwrap();
        prop_assert!(lhs.iter().zip(&rhs).all(|(p, q)| (p - q).abs() < 1e-9));
    }
}
