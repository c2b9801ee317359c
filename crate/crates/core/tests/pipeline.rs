use std::collections::HashSet;

use nimbus_core::config::RunConfig;
use nimbus_core::models::{Mae, Vae};
use nimbus_core::pipeline::{self as pl, tag, Climatology, Layout};
use nimbus_core::Error;
use proptest::prelude::*;

fn small() -> RunConfig {
    RunConfig::from_json(
        r#"{"data": {"h": 16, "w": 32, "t": 30, "train_steps": 20},
            "vae": {"latent_channels": 4, "hidden": [4, 8]},
            "mae": {"k": 2, "latent_channels": 4, "hidden": [4, 8]},
            "forecast": {"members": 2, "lead_times": 3, "persistence": true},
            "verify": {"cases": 3}}"#,
    )
    .unwrap()
}

#[test]
fn stage_seeds_are_distinct_and_stable() {
    let tags = [
        tag::DATA,
        tag::VAE,
        tag::MAE,
        tag::FRAMES,
        tag::DENOISER,
        tag::FORECAST,
        tag::VERIFY,
        tag::DIAGNOSE,
    ];
    let seeds: HashSet<u64> = tags.iter().map(|&t| pl::derive_seed(3, t)).collect();
    assert_eq!(seeds.len(), tags.len());
    assert_eq!(pl::derive_seed(3, tag::VAE), pl::derive_seed(3, tag::VAE));
    assert_ne!(pl::derive_seed(3, tag::VAE), pl::derive_seed(4, tag::VAE));
}

#[test]
fn split_and_climatology_use_the_training_steps() {
    let cfg = small();
    let series = pl::gen_data(&cfg, 0).unwrap();
    let (train, held) = pl::split(&cfg, &series).unwrap();
    assert_eq!((train.times(), held.times()), (20, 10));
    assert_eq!(held.data()[[0, 1, 2, 3]], series.data()[[20, 1, 2, 3]]);

    let clim = Climatology::of(&train).unwrap();
    let x = train.data();
    let n = (x.dim().0 * x.dim().2 * x.dim().3) as f64;
    for (v, spec) in clim.state.iter().enumerate() {
        let mean = x
            .index_axis(ndarray::Axis(1), v)
            .iter()
            .map(|&a| a as f64)
            .sum::<f64>()
            / n;
        assert!(
            (spec.mean - mean).abs() < 1e-6 * (1.0 + mean.abs()),
            "{v}: {} vs {mean}",
            spec.mean
        );
    }

    let wrong = RunConfig::from_json(r#"{"data": {"h": 16, "w": 32, "t": 40, "train_steps": 20}, "mae": {"k": 2}, "forecast": {"lead_times": 3}}"#).unwrap();
    assert!(matches!(pl::split(&wrong, &series), Err(Error::Config(_))));
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae").join("vae.pypt");
    let a = Vae::new(cfg.vae.clone(), 8, 1).unwrap();
    pl::save_checkpoint(&a.params, &path).unwrap();

    let mut b = Vae::new(cfg.vae.clone(), 8, 2).unwrap();
    pl::load_checkpoint(&mut b.params, &path).unwrap();
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }

    let mut mae = Mae::new(cfg.mae.clone(), 8, 0).unwrap();
    assert!(pl::load_checkpoint(&mut mae.params, &path).is_err());
    let mut other = Vae::new(cfg.vae.clone(), 3, 0).unwrap();
    assert!(pl::load_checkpoint(&mut other.params, &path).is_err());

    let missing = dir.path().join("nope.pypt");
    match pl::load_checkpoint(&mut b.params, &missing) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, missing),
        other => panic!("{other:?}"),
    }
}

#[test]
fn persistence_cases_round_trip_through_disk() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let series = pl::gen_data(&cfg, 1).unwrap();
    let (train, held) = pl::split(&cfg, &series).unwrap();
    let models = pl::load_models(&cfg, &Layout::new(dir.path()), &train, 1).unwrap();
    let starts = pl::case_starts(
        held.times(),
        cfg.mae.k,
        cfg.forecast.lead_times,
        cfg.verify.cases,
    )
    .unwrap();
    let cases =
        pl::forecast_cases(&models, &cfg.sampler, &cfg.forecast, &held, &starts, 1).unwrap();

    // Persistence repeats the last initial frame at every lead.
    let last = held
        .data()
        .index_axis(ndarray::Axis(0), starts[0] + cfg.mae.k)
        .to_owned();
    let f = &cases[0].forecast.data;
    for lead in 0..cfg.forecast.lead_times {
        for m in 0..cfg.forecast.members {
            assert_eq!(f.slice(ndarray::s![m, lead, .., .., ..]), last);
        }
    }

    let out = dir.path().join("forecast");
    pl::write_cases(&out, &cases, &held, &cfg).unwrap();
    let back = pl::read_cases(&out, &held, cfg.mae.k).unwrap();
    assert_eq!(back, cases);

    let report = pl::score(&back, &held, &cfg, 1).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
}

#[test]
fn missing_case_index_is_named() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let series = pl::gen_data(&cfg, 0).unwrap();
    let (_, held) = pl::split(&cfg, &series).unwrap();
    match pl::read_cases(dir.path(), &held, 2) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("cases.json")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn case_starts_rejects_short_series() {
    assert!(pl::case_starts(5, 2, 3, 1).is_err());
    assert_eq!(pl::case_starts(6, 2, 3, 4).unwrap(), vec![0]);
}

proptest! {
    #[test]
    fn case_starts_fit_and_are_spread(held in 6usize..200, k in 1usize..5, leads in 1usize..6, cases in 1usize..10) {
        let span = k + 1 + leads;
        prop_assume!(held >= span);
        let s = pl::case_starts(held, k, leads, cases).unwrap();
        prop_assert!(!s.is_empty() && s.len() <= cases);
        prop_assert_eq!(s[0], 0);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*s.last().unwrap() + span <= held);
        if cases > 1 {
            prop_assert_eq!(*s.last().unwrap(), held - span);
        }
    }
}
