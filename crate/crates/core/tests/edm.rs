use nimbus_core::autodiff::{Graph, Params, Tensor};
use nimbus_core::edm::{
    sample_deterministic, sample_stochastic, DenoiserConfig, DenoiserNet, DiffusionSample,
    EdmConfig, GaussianDenoiser, SamplerConfig,
};
use nimbus_core::models::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Data on the sigma_data = 0.5 scale: variances around 0.25.
fn toy(dim: usize, seed: u64) -> GaussianDenoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cov = (0..dim).map(|_| rng.random_range(0.1..0.5)).collect();
    GaussianDenoiser::new(mu, cov).unwrap()
}

fn draw(
    den: &GaussianDenoiser,
    n: usize,
    cfg: &SamplerConfig,
    stochastic: bool,
    seed: u64,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            if stochastic {
                sample_stochastic(den, den.mu.len(), &mut rng, cfg).unwrap()
            } else {
                sample_deterministic(den, den.mu.len(), &mut rng, cfg).unwrap()
            }
        })
        .collect()
}

fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let var = (0..d)
        .map(|j| xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

#[test]
fn deterministic_samples_match_gaussian_moments() {
    let den = toy(16, 0);
    let xs = draw(&den, 4096, &SamplerConfig::default(), false, 11);
    let (mean, var) = moments(&xs);
    for j in 0..16 {
        assert!(
            (mean[j] - den.mu[j]).abs() < 0.05,
            "dim {j}: mean {} vs {}",
            mean[j],
            den.mu[j]
        );
        assert!(
            (var[j] / den.cov[j] - 1.0).abs() < 0.10,
            "dim {j}: var {} vs {}",
            var[j],
            den.cov[j]
        );
    }
    // Reproducible given the seed.
    assert_eq!(
        draw(&den, 4, &SamplerConfig::default(), false, 11),
        xs[..4].to_vec()
    );
}

#[test]
fn fitted_gaussian_converges_with_steps() {
    let den = toy(8, 1);
    let kl = |steps: usize| {
        let cfg = SamplerConfig {
            steps,
            ..SamplerConfig::default()
        };
        let (mean, var) = moments(&draw(&den, 2048, &cfg, false, 3));
        (0..8)
            .map(|j| {
                let (m, v, m0, v0) = (mean[j], var[j], den.mu[j], den.cov[j]);
                0.5 * (v / v0 + (m - m0).powi(2) / v0 - 1.0 + (v0 / v).ln())
            })
            .sum::<f64>()
    };
    let k: Vec<f64> = [5, 10, 25].iter().map(|&n| kl(n)).collect();
    assert!(k[0] > k[1] && k[1] > k[2], "{k:?}");
}

#[test]
fn churn_widens_the_ensemble() {
    let den = toy(16, 2);
    let cfg = SamplerConfig::default();
    let spread = |stochastic| {
        let (_, var) = moments(&draw(&den, 256, &cfg, stochastic, 5));
        var.iter().map(|v| v.sqrt()).sum::<f64>() / 16.0
    };
    let (det, sto) = (spread(false), spread(true));
    assert!(sto > det, "stochastic {sto} vs deterministic {det}");
}

#[test]
fn churn_defaults() {
    let c = SamplerConfig::default();
    assert_eq!(
        (c.steps, c.s_churn, c.s_min, c.s_max, c.s_noise),
        (25, 2.5, 0.75, 68.0, 1.1)
    );
    assert_eq!((c.sigma_min, c.sigma_max, c.rho), (0.002, 80.0, 7.0));
    let e = EdmConfig::default();
    assert_eq!((e.p_mean, e.p_std), (-1.2, 1.2));
    let json = r#"{"steps": 10, "s_churn": 0.0, "s_min": 0.5, "s_max": 50, "s_noise": 1.0, "sigma_min": 0.01, "sigma_max": 40, "rho": 5}"#;
    let parsed: SamplerConfig = serde_json::from_str(json).unwrap();
    assert_eq!(parsed.steps, 10);
    assert!(serde_json::from_str::<SamplerConfig>(r#"{"stepz": 3}"#).is_err());
}

fn randomize(p: &mut Params, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = (0.3 * e) as f32;
        }
    }
}

#[test]
fn network_loss_gradient_matches_finite_differences() {
    let cfg = DenoiserConfig {
        width: 3,
        blocks: 2,
        fourier: 2,
        embed: 3,
        train: TrainConfig::default(),
    };
    let mut net = DenoiserNet::new(cfg, 2, Some((2, 2)), 0.8, 0).unwrap();
    randomize(&mut net.params, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e as f32
        })
    };
    let samples: Vec<DiffusionSample> = (0..2)
        .map(|_| DiffusionSample {
            target: t(&[2, 4, 4]),
            zbar: Some(t(&[2, 2, 4, 4])),
            zprev: t(&[2, 4, 4]),
        })
        .collect();
    let batch: Vec<&DiffusionSample> = samples.iter().collect();
    let edm = EdmConfig::default();
    let params: Params<f64> = net.params.cast();
    let loss = |p: &Params<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let b = p.bind_frozen(&mut g).unwrap();
        let l = net
            .loss_graph(&mut g, &b, &batch, &edm, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        g.value(l).item()
    };
    let mut g = Graph::<f64>::new();
    let b = params.bind(&mut g).unwrap();
    let l = net
        .loss_graph(&mut g, &b, &batch, &edm, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let grads = b.grads(&params, &g.backward(l).unwrap());
    let h = 1e-5;
    for (name, analytic) in &grads {
        let mut numeric = Vec::new();
        for i in 0..analytic.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0f64, |m, (a, n)| m.max((a - n).abs() / scale));
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}
