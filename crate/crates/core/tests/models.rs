use ndarray::Array4;
use nimbus_core::autodiff::{Graph, Tensor};
use nimbus_core::grid::{default_lat, lat_weights, LatWeights, VariableSpec};
use nimbus_core::models::{windows, GammaSchedule, Mae, MaeConfig, TrainConfig, Vae, VaeConfig};
use nimbus_core::regularize::Strategy;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const V: usize = 3;
const H: usize = 16;
const W: usize = 32;

fn specs() -> Vec<VariableSpec> {
    (0..V)
        .map(|v| VariableSpec::new(format!("v{v}"), 0.0, 1.0))
        .collect()
}

fn lat() -> LatWeights {
    lat_weights(&default_lat(H)).unwrap()
}

fn series(t: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((t, V, H, W), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        e as f32
    })
}

fn train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

fn vae_cfg(regularizer: Strategy, gamma: GammaSchedule, steps: usize) -> VaeConfig {
    VaeConfig {
        latent_channels: 4,
        hidden: [4, 8],
        regularizer,
        gamma,
        train: train(steps),
        ..VaeConfig::default()
    }
}

fn mae_cfg(k: usize, steps: usize) -> MaeConfig {
    MaeConfig {
        k,
        hidden: [4, 8],
        latent_channels: 4,
        train: train(steps),
    }
}

#[test]
fn reparameterize_is_seeded_and_handles_extreme_logvar() {
    let mu = Tensor::from_fn(&[2, 4, 4, 8], |i| i as f32 * 0.01);
    let lv = Tensor::from_fn(&[2, 4, 4, 8], |_| 0.0);
    let draw = |seed| Vae::reparameterize(&mu, &lv, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(draw(1).data(), draw(1).data());
    assert_ne!(draw(1).data(), draw(2).data());

    let tiny = Vae::reparameterize(
        &mu,
        &Tensor::from_fn(&[2, 4, 4, 8], |_| -60.0),
        &mut ChaCha8Rng::seed_from_u64(3),
    );
    assert!(tiny.max_abs_diff(&mu) < 1e-9);

    let n = 20_000;
    let zero = Tensor::zeros(&[n]);
    let wide = Vae::reparameterize(
        &zero,
        &Tensor::from_fn(&[n], |_| 4.0),
        &mut ChaCha8Rng::seed_from_u64(4),
    );
    let var = wide.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n as f64;
    assert!((var / 4f64.exp() - 1.0).abs() < 0.05, "{var}");
    assert!(wide.data().iter().all(|x| x.is_finite()));
}

#[test]
fn vae_shapes_round_trip() {
    let vae = Vae::new(vae_cfg(Strategy::None, GammaSchedule::Fixed(1.0), 1), V, 0).unwrap();
    let x = Tensor::from_fn(&[2, V, H, W], |i| (i as f32 * 0.37).sin());
    let (mu, lv) = vae.encode(&x).unwrap();
    assert_eq!(mu.shape(), &[2, 4, H / 4, W / 4]);
    assert_eq!(lv.shape(), mu.shape());
    assert_eq!(vae.decode(&mu).unwrap().shape(), x.shape());
}

#[test]
fn mae_latent_shape_follows_k() {
    for k in [2, 4] {
        let mae = Mae::new(mae_cfg(k, 1), V, 0).unwrap();
        let w = windows(&series(k + 1, 0), &[0], k + 1);
        let z = mae.encode(&w).unwrap();
        let f = mae.stack.spatial_factor();
        assert_eq!(z.shape(), &[1, 4, 1 + k / 2, H / f, W / f]);
        assert_eq!(mae.cfg.latent_frames(), 1 + k / 2);
    }
}

#[test]
fn untrained_mae_error_is_weighted_signal_energy() {
    let k = 2;
    let mae = Mae::new(mae_cfg(k, 1), V, 5).unwrap();
    let x = series(k + 1, 9);
    let w = windows(&x, &[0], k + 1);
    let errs = mae.frame_errors(&w, &specs(), &lat()).unwrap();
    let lw = lat();
    for (t, e) in errs.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for v in 0..V {
            for i in 0..H {
                for j in 0..W {
                    num += lw.as_slice()[i] * (x[[t, v, i, j]] as f64).powi(2);
                    den += lw.as_slice()[i];
                }
            }
        }
        assert!(
            (e - num / den).abs() < 1e-5 * (num / den),
            "frame {t}: {e} vs {}",
            num / den
        );
    }

    let mut g = Graph::new();
    let b = mae.params.bind_frozen(&mut g).unwrap();
    let l = mae.loss_graph(&mut g, &b, &w, &specs(), &lat()).unwrap();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!((g.value(l).item() as f64 - mean).abs() < 1e-5 * mean);
}

#[test]
fn training_lowers_the_loss() {
    let x = series(12, 1);
    let mut vae = Vae::new(vae_cfg(Strategy::None, GammaSchedule::Fixed(1.0), 60), V, 0).unwrap();
    let curve = vae.fit(&x, &specs(), &lat(), 0).unwrap();
    let ma = curve.moving_average(10);
    assert!(ma.last().unwrap() < &ma[0], "{:?}", curve.0);

    let mut mae = Mae::new(mae_cfg(2, 60), V, 0).unwrap();
    let curve = mae.fit(&x, &specs(), &lat(), 0).unwrap();
    let ma = curve.moving_average(10);
    assert!(ma.last().unwrap() < &ma[0], "{:?}", curve.0);
}

#[test]
fn identical_seeds_give_identical_weights() {
    let x = series(8, 2);
    let run = |seed| {
        let mut vae =
            Vae::new(vae_cfg(Strategy::Vamfm, GammaSchedule::Uniform, 5), V, seed).unwrap();
        let curve = vae.fit(&x, &specs(), &lat(), seed).unwrap();
        (curve, vae.params)
    };
    let (ca, pa) = run(7);
    let (cb, pb) = run(7);
    assert_eq!(ca, cb);
    for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    assert_ne!(run(8).0, ca);
}

#[test]
fn full_retention_matches_the_unregularized_trace() {
    let x = series(8, 3);
    let trace = |s| {
        let mut vae = Vae::new(vae_cfg(s, GammaSchedule::Fixed(1.0), 6), V, 4).unwrap();
        vae.fit(&x, &specs(), &lat(), 4).unwrap()
    };
    let base = trace(Strategy::None);
    for s in [Strategy::Se, Strategy::Ffm, Strategy::Vamfm] {
        assert_eq!(trace(s), base, "{s:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reparameterize_preserves_shape_and_mean_at_zero_noise(n in 1usize..64, m in -5.0f32..5.0) {
        let mu = Tensor::from_fn(&[n], |_| m);
        let z = Vae::reparameterize(&mu, &Tensor::from_fn(&[n], |_| -80.0), &mut ChaCha8Rng::seed_from_u64(0));
        prop_assert_eq!(z.shape(), &[n][..]);
        prop_assert!(z.data().iter().all(|&v| (v - m).abs() < 1e-6));
    }
}
