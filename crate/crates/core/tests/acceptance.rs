//! Acceptance suite: one PASS/FAIL line per criterion with the pinned
//! tolerance and the measured value. Errors and broken invariants gate the
//! exit status. Directional claims that do not hold at this scale are
//! printed as FAIL (non-gating) unless `NIMBUS_ACCEPT_STRICT=1`.
//! `NIMBUS_ACCEPT_ONLY=1,4,7` runs a subset.

mod common;

use std::time::{Duration, Instant};

use common::dft::{max_rel_dev, naive_dft};
use common::gradcheck::{cases, max_rel_error};
use ndarray::{s, Array2, Array3};
use nimbus_core::autodiff::{Params, Tensor};
use nimbus_core::causal3d::{encode_full, encode_monolithic, CausalStack};
use nimbus_core::config::{CondKind, RunConfig};
use nimbus_core::edm::{
    sample_deterministic, sample_stochastic, EdmConfig, GaussianDenoiser, SamplerConfig,
};
use nimbus_core::forecast::{ForecastConfig, ForecastModels, LatentDenoiser};
use nimbus_core::grid::{gen_synthetic, lat_weights, FieldBatch, SynthConfig};
use nimbus_core::pipeline::{self as pl, Climatology};
use nimbus_core::regularize::{MaskPlan, Strategy};
use nimbus_core::spectral::{fft2, field_profile, retained_fraction};
use nimbus_core::verify::{crps_empirical, crps_fair, rank_histogram, SpreadSkill};
use nimbus_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const ABLATION: &str = include_str!("../../../configs/ablation.json");

struct Outcome {
    pass: bool,
    /// The part that must hold regardless of scale.
    hard: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        hard: pass,
        detail: detail.into(),
    })
}

fn directional(pass: bool, hard: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        hard,
        detail: detail.into(),
    })
}

struct Suite {
    strict: bool,
    only: Option<Vec<usize>>,
    failed_gates: Vec<usize>,
    passed: usize,
}

impl Suite {
    fn run(
        &mut self,
        id: usize,
        name: &str,
        limit: Option<Duration>,
        f: impl FnOnce() -> Result<Outcome>,
    ) {
        if self.only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("[SKIP] {id:>2} {name}");
            return;
        }
        let t0 = Instant::now();
        let res = f();
        let dt = t0.elapsed();
        let (mut pass, mut hard, mut detail) = match res {
            Ok(o) => (o.pass, o.hard, o.detail),
            Err(e) => (false, false, format!("error: {e}")),
        };
        if let Some(l) = limit {
            if dt > l {
                (pass, hard) = (false, false);
                detail.push_str(&format!("; runtime over {}s", l.as_secs()));
            }
        }
        let gate = !hard || self.strict;
        let tag = match (pass, gate) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        println!(
            "[{tag}] {id:>2} {name}: {detail} [{:.1}s]",
            dt.as_secs_f64()
        );
        if pass {
            self.passed += 1;
        } else if gate {
            self.failed_gates.push(id);
        }
    }
}

fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0))
}

fn c1_fft() -> Result<Outcome> {
    let (mut dev, mut pars) = (0f64, 0f64);
    for (i, n) in [8, 12, 16, 64].into_iter().enumerate() {
        let x = random(n, n, i as u64);
        let s = fft2(x.view())?;
        dev = dev.max(max_rel_dev(&s.coeffs, &naive_dft(&x)));
        let lhs: f64 = x.iter().map(|v| v * v).sum();
        let rhs = s.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n) as f64;
        pars = pars.max(((lhs - rhs) / lhs).abs());
    }
    outcome(
        dev < 1e-6 && pars < 1e-5,
        format!("max rel dev {dev:.2e} (< 1e-6), Parseval {pars:.2e} (< 1e-5)"),
    )
}

fn c2_vamfm() -> Result<Outcome> {
    let x = gen_synthetic(&SynthConfig {
        t: 1,
        ..SynthConfig::default()
    })?;
    let nv = x.specs().len();
    let specs = x.specs();
    let field = Array3::from_shape_fn((nv, x.dims().2, x.dims().3), |(v, i, j)| {
        (x.data()[[0, v, i, j]] as f64 - specs[v].mean) / specs[v].std
    });
    let plan = MaskPlan::new(Strategy::Vamfm, field.view(), 0.5)?;
    let (mut va, mut ff, mut aligned, mut coarse) = (Vec::new(), Vec::new(), true, 0);
    for v in 0..nv {
        let ch = field.slice(s![v, .., ..]);
        let spec = fft2(ch)?;
        let mass = field_profile(ch)?.max_shell_mass();
        let r = plan.input_cutoffs[v].expect("vamfm masks every variable");
        let f = retained_fraction(&spec, r);
        aligned &= (f - 0.5).abs() <= mass + 1e-12;
        // One shell above 0.5 leaves no radial cutoff near 0.5.
        coarse += usize::from(mass > 0.5);
        va.push(f);
        ff.push(retained_fraction(&spec, 0.05));
    }
    let range = |xs: &[f64]| {
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let (rv, rf) = (range(&va), range(&ff));
    directional(
        aligned && 5.0 * rv <= rf,
        aligned,
        format!(
            "VA-MFM fractions within one shell mass of 0.5: {aligned}; range {rv:.4} vs FFM(0.05) {rf:.4} (ratio {:.1}, need >= 5); {coarse}/{nv} variables hold > 0.5 in a single shell",
            rf / rv
        ),
    )
}

fn c3_causal() -> Result<Outcome> {
    let (mut worst, mut causal) = (0f64, true);
    for k in [2usize, 4, 6] {
        for seed in 0..50u64 {
            let stack = CausalStack::new("enc", 2, &[3, 4, 3], true)?;
            let mut p = Params::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            stack.init(&mut p, &mut rng);
            for (_, t) in p.iter_mut() {
                if t.shape().len() == 1 {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-0.2..0.2));
                }
            }
            let x = Tensor::from_fn(&[1, 2, k + 1, 8, 12], |_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e as f32
            });
            let a = encode_full(&stack, &p, &x, true)?;
            worst = worst.max(a.max_abs_diff(&encode_monolithic(&stack, &p, &x, true)?));
            // Input frame j enters at stage floor((j+3)/2); earlier latent frames must not move.
            let z = encode_full(&stack, &p, &x, false)?;
            let [_, zc, zf, zh, zw] = z.shape()[..] else {
                unreachable!("5-d latent")
            };
            let frame = |t: &Tensor, f: usize| -> Vec<f32> {
                (0..zc)
                    .flat_map(|c| t.data()[(c * zf + f) * zh * zw..][..zh * zw].to_vec())
                    .collect()
            };
            for j in 0..=k {
                let mut y = x.clone();
                for c in 0..2 {
                    y.data_mut()[(c * (k + 1) + j) * 96] += 5.0;
                }
                let zy = encode_full(&stack, &p, &y, false)?;
                let stage = (j + 3) / 2;
                for f in 0..stage - 1 {
                    causal &= frame(&z, f) == frame(&zy, f);
                }
                causal &= frame(&z, stage - 1) != frame(&zy, stage - 1);
            }
        }
    }
    outcome(worst < 1e-6 && causal, format!("max |stream - mono| {worst:.2e} (< 1e-6) over 150 runs; strict causality exact: {causal}"))
}

fn c4_grad() -> Result<Outcome> {
    let mut worst = (0f64, "");
    let all = cases();
    for case in &all {
        for seed in 0..20 {
            let e = max_rel_error(case, seed)?;
            if e > worst.0 {
                worst = (e, case.name);
            }
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!(
            "{} ops x 20 seeds, worst rel error {:.2e} ({}) (< 1e-4)",
            all.len(),
            worst.0,
            worst.1
        ),
    )
}

fn c5_edm() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mu: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cov: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..0.5)).collect();
    let den = GaussianDenoiser::new(mu.clone(), cov.clone())?;
    let cfg = SamplerConfig::default();
    let xs: Vec<Vec<f64>> = (0..4096u64)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            r.set_stream(i + 1);
            sample_deterministic(&den, 16, &mut r, &cfg)
        })
        .collect::<Result<_>>()?;
    let n = xs.len() as f64;
    let (mut dm, mut dv) = (0f64, 0f64);
    for j in 0..16 {
        let m = xs.iter().map(|x| x[j]).sum::<f64>() / n;
        let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
        dm = dm.max((m - mu[j]).abs());
        dv = dv.max((v / cov[j] - 1.0).abs());
    }
    let zero = SamplerConfig {
        s_churn: 0.0,
        ..cfg.clone()
    };
    let bitwise = (0..32u64).all(|i| {
        let draw = |stochastic: bool| {
            let mut r = ChaCha8Rng::seed_from_u64(i);
            if stochastic {
                sample_stochastic(&den, 16, &mut r, &zero).ok()
            } else {
                sample_deterministic(&den, 16, &mut r, &zero).ok()
            }
        };
        draw(true) == draw(false)
    });
    let churn = (cfg.s_churn, cfg.s_min, cfg.s_max, cfg.s_noise) == (2.5, 0.75, 68.0, 1.1)
        && cfg.steps == 25;
    let edm = EdmConfig::default();
    outcome(
        dm < 0.05 && dv < 0.10 && bitwise && churn && (edm.p_mean, edm.p_std) == (-1.2, 1.2),
        format!("max |mean err| {dm:.4} (< 0.05), max rel var err {dv:.4} (< 0.10), churn=0 bitwise: {bitwise}, churn defaults: {churn}"),
    )
}

fn crps_by_integration(xs: &[f64], y: f64) -> f64 {
    let mut pts: Vec<f64> = xs.to_vec();
    pts.push(y);
    pts.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    let integrand = |t: f64| {
        let f = xs.iter().filter(|&&x| x <= t).count() as f64 / m;
        let h = if t >= y { 1.0 } else { 0.0 };
        (f - h).powi(2)
    };
    pts.windows(2)
        .map(|p| (p[1] - p[0]) * integrand(0.5 * (p[0] + p[1])))
        .sum()
}

fn c6_crps() -> Result<Outcome> {
    let hand = crps_fair(&[0.0, 2.0], 1.0)? == 0.0 && crps_empirical(&[0.0, 2.0], 1.0)? == 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0f64;
    for _ in 0..100 {
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(-4.0..4.0);
        worst = worst.max((crps_empirical(&xs, y)? - crps_by_integration(&xs, y)).abs());
    }
    outcome(
        hand && worst < 1e-6,
        format!(
            "hand values {{0,2}}/1 -> (0, 0.5): {hand}; integration max dev {worst:.2e} (< 1e-6)"
        ),
    )
}

fn ensemble_cases(m: usize, n: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        let members = Normal::new(3.0 * e, spread).expect("positive spread");
        cases.push((0..m).map(|_| members.sample(&mut rng)).collect());
        let noise: f64 = StandardNormal.sample(&mut rng);
        truths.push(3.0 * e + noise);
    }
    (cases, truths)
}

fn c7_calibration() -> Result<Outcome> {
    let lat = lat_weights(&[0.0])?;
    let stats = |spread: f64, seed: u64| -> Result<(f64, Vec<u64>, f64)> {
        let (cases, truths) = ensemble_cases(16, 10_000, spread, seed);
        let mut ss = SpreadSkill::default();
        for (xs, &y) in cases.iter().zip(&truths) {
            let members =
                Array3::from_shape_vec((16, 1, 1), xs.iter().map(|&v| v as f32).collect())
                    .expect("16 members");
            ss.add(
                members.view(),
                Array2::from_elem((1, 1), y as f32).view(),
                &lat,
            )?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let h = rank_histogram(
            cases
                .iter()
                .map(|c| c.as_slice())
                .zip(truths.iter().copied()),
            &mut rng,
        )?;
        Ok((ss.ratio(true), h.counts, h.p_value))
    };
    let (ssr, _, p) = stats(1.0, 1)?;
    let (ssr_half, counts, _) = stats(0.5, 2)?;
    let uniform = 10_000.0 / 17.0;
    let ends = (counts[0] + counts[16]) as f64;
    let middle = counts[8] as f64;
    let u_shaped = ends > 2.0 * 2.0 * uniform && middle < uniform;
    outcome(
        (0.95..=1.05).contains(&ssr) && p > 0.01 && ssr_half < 0.6 && u_shaped,
        format!("calibrated SSR {ssr:.3} in [0.95, 1.05], chi-square p {p:.3} (> 0.01); half-spread SSR {ssr_half:.3} (< 0.6), U-shaped: {u_shaped}"),
    )
}

fn ablation_config() -> RunConfig {
    RunConfig::from_json(ABLATION).expect("bundled ablation config is valid")
}

fn c8_ablation() -> Result<Outcome> {
    let cfg = ablation_config();
    let table = pl::ablate(&cfg, 0)?;
    let mut csv = Vec::new();
    table.write_grid_csv(&mut csv, &cfg.verify.conditioners, &cfg.verify.regularizers)?;
    println!("     replicate-mean first-lead RMSE (standardized):");
    for line in String::from_utf8_lossy(&csv).lines() {
        println!("       {line}");
    }
    let (mut ordered, mut beats) = (0, 0);
    let rmse = |r, c, g| table.get(r, c, g).map(|x| x.first.rmse).unwrap_or(f64::NAN);
    for r in 0..table.replicates() {
        let (va, ff, no) = (
            rmse(r, CondKind::Mae, Strategy::Vamfm),
            rmse(r, CondKind::Mae, Strategy::Ffm),
            rmse(r, CondKind::Mae, Strategy::None),
        );
        let uncond = rmse(r, CondKind::None, Strategy::None);
        println!("     replicate {r}: 3d-mae+vamfm {va:.4}, +ffm {ff:.4}, alone {no:.4}; unconditioned {uncond:.4}");
        ordered += usize::from(va <= ff && ff <= no);
        beats += usize::from(no < uncond);
    }
    let n = table.replicates();
    directional(
        ordered >= 2 && beats == n,
        true,
        format!("ordering vamfm <= ffm <= none under 3d-mae in {ordered}/{n} replicates (need >= 2); 3d-mae beats unconditioned in {beats}/{n} (need all)"),
    )
}

/// One trained 3D-MAE + VA-MFM cell of the ablation configuration.
fn trained_cell(cfg: &RunConfig, seed: u64) -> Result<(ForecastModels, FieldBatch, Climatology)> {
    let series = pl::gen_data(cfg, seed)?;
    let (train, held_out) = pl::split(cfg, &series)?;
    let clim = Climatology::of(&train)?;
    let (mae, _) = pl::train_mae(&cfg.mae, &train, &clim, seed)?;
    let vae_cfg = nimbus_core::models::VaeConfig {
        regularizer: Strategy::Vamfm,
        ..cfg.vae.clone()
    };
    let (vae, _) = pl::train_vae(&vae_cfg, &train, &clim, seed)?;
    let mut models = pl::encoding_models(
        &vae,
        nimbus_core::forecast::Conditioner::Mae(mae),
        &clim,
        cfg.mae.k,
    );
    let samples = pl::diffusion_samples(&train, &models)?;
    let (net, _) = pl::train_denoiser(&cfg.diffusion, &samples, &models, seed)?;
    models.denoiser = LatentDenoiser::Net(net);
    Ok((models, held_out, clim))
}

fn c9_diffusability(cell: &Result<(ForecastModels, FieldBatch, Climatology)>) -> Result<Outcome> {
    let (models, held_out, _) = cell
        .as_ref()
        .map_err(|e| nimbus_core::Error::State(e.to_string()))?;
    let cfg = ablation_config();
    let rep = pl::diagnose(models, &cfg.sampler, held_out, &cfg.verify, 0)?;
    let top = rep
        .band_edges
        .iter()
        .position(|&e| e >= 0.8)
        .expect("band edge at 0.8");
    let enc: f64 = rep.encoder_energy[top..].iter().sum();
    let gen: f64 = rep.generated_energy[top..].iter().sum();
    directional(
        gen <= enc,
        true,
        format!(
            "top band r >= 0.8 energy: generated {gen:.4} <= encoder {enc:.4} over {} samples",
            cfg.verify.diagnose_samples
        ),
    )
}

fn c10_churn(cell: &Result<(ForecastModels, FieldBatch, Climatology)>) -> Result<Outcome> {
    let (models, held_out, clim) = cell
        .as_ref()
        .map_err(|e| nimbus_core::Error::State(e.to_string()))?;
    let cfg = ablation_config();
    let lat = lat_weights(held_out.lat())?;
    let starts = pl::case_starts(
        held_out.times(),
        cfg.mae.k,
        cfg.forecast.lead_times,
        cfg.verify.cases,
    )?;
    let run = |stochastic: bool| -> Result<pl::LeadScores> {
        let f = ForecastConfig {
            stochastic,
            ..cfg.forecast.clone()
        };
        let cases = pl::forecast_cases(models, &cfg.sampler, &f, held_out, &starts, 0)?;
        pl::lead_scores(&cases, &clim.state, &lat, 0, cfg.verify.ssr_corrected)
    };
    let (det, sto) = (run(false)?, run(true)?);
    let rel = sto.rmse / det.rmse - 1.0;
    directional(
        sto.ssr > det.ssr && rel < 0.05,
        true,
        format!(
            "SSR {:.3} -> {:.3} with churn; first-lead RMSE {:.4} -> {:.4} ({:+.1}%, need < +5%)",
            det.ssr,
            sto.ssr,
            det.rmse,
            sto.rmse,
            100.0 * rel
        ),
    )
}

fn main() {
    let strict = std::env::var("NIMBUS_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let only = std::env::var("NIMBUS_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut suite = Suite {
        strict,
        only,
        failed_gates: Vec::new(),
        passed: 0,
    };
    let secs = Duration::from_secs;
    suite.run(1, "FFT correctness", Some(secs(5)), c1_fft);
    suite.run(2, "VA-MFM energy alignment", Some(secs(10)), c2_vamfm);
    suite.run(3, "causal streaming equivalence", Some(secs(30)), c3_causal);
    suite.run(4, "gradient fidelity", Some(secs(120)), c4_grad);
    suite.run(5, "EDM sampler validity", Some(secs(120)), c5_edm);
    suite.run(6, "CRPS oracle", Some(secs(5)), c6_crps);
    suite.run(7, "calibration statistics", Some(secs(30)), c7_calibration);
    suite.run(8, "directional ablation", None, c8_ablation);
    let wants_cell = suite
        .only
        .as_ref()
        .is_none_or(|o| o.contains(&9) || o.contains(&10));
    let cell = if wants_cell {
        trained_cell(&ablation_config(), 0)
    } else {
        Err(nimbus_core::Error::State("skipped".into()))
    };
    suite.run(9, "diffusability direction", None, || {
        c9_diffusability(&cell)
    });
    suite.run(10, "churn spread direction", None, || c10_churn(&cell));
    println!("{}/10 criteria pass", suite.passed);
    if !suite.failed_gates.is_empty() {
        println!("gating failures: {:?}", suite.failed_gates);
        std::process::exit(1);
    }
}
