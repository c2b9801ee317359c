//! End-to-end stages: data, autoencoders, denoiser, rollout, scoring,
//! diagnostics and the ablation grid. Artifacts live under one root
//! directory, one subdirectory per stage.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_params, write_params, Params, Tensor};
use crate::config::{CondKind, DiffusionConfig, RunConfig, VerifyConfig};
use crate::edm::{
    sample_deterministic, sample_stochastic, DenoiserNet, DiffusionSample, NetDenoiser,
    SamplerConfig,
};
use crate::error::{config, shape, Error, Result};
use crate::forecast::{
    rollout, Conditioner, EnsembleForecast, ForecastConfig, ForecastModels, LatentDenoiser,
};
use crate::grid::{
    gen_synthetic, lat_weights, read_fields, residuals, standardize, write_fields, FieldBatch,
    LatWeights, VariableSpec,
};
use crate::models::{GammaSchedule, LossCurve, Mae, MaeConfig, Vae, VaeConfig};
use crate::regularize::Strategy;
use crate::verify::{
    crps_field, diffusability_report, evaluate, mse_ensemble_mean, DiffusabilityReport,
    MetricReport, SpreadSkill,
};

/// Independent seed for stage `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1000 + tag);
    r.next_u64()
}

pub mod tag {
    pub const DATA: u64 = 1;
    pub const VAE: u64 = 2;
    pub const MAE: u64 = 3;
    pub const FRAMES: u64 = 4;
    pub const DENOISER: u64 = 5;
    pub const FORECAST: u64 = 6;
    pub const VERIFY: u64 = 7;
    pub const DIAGNOSE: u64 = 8;
}

/// Full synthetic series.
pub fn gen_data(cfg: &RunConfig, seed: u64) -> Result<FieldBatch> {
    gen_synthetic(&cfg.data.synth(derive_seed(seed, tag::DATA)))
}

/// `(train, held_out)` split of the series along time.
pub fn split(cfg: &RunConfig, series: &FieldBatch) -> Result<(FieldBatch, FieldBatch)> {
    let t = series.times();
    if t != cfg.data.t {
        return Err(config(format!(
            "series has {t} steps, config expects {}",
            cfg.data.t
        )));
    }
    Ok((
        series.slice_time(0, cfg.data.train_steps)?,
        series.slice_time(cfg.data.train_steps, t)?,
    ))
}

/// State and residual statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    pub state: Vec<VariableSpec>,
    pub residual: Vec<VariableSpec>,
}

impl Climatology {
    pub fn of(train: &FieldBatch) -> Result<Self> {
        Ok(Self {
            state: train.estimate_specs(),
            residual: residuals(train)?.specs().to_vec(),
        })
    }
}

fn lat_of(x: &FieldBatch) -> Result<LatWeights> {
    lat_weights(x.lat())
}

fn standardized_states(x: &FieldBatch, clim: &Climatology) -> Result<Array4<f32>> {
    Ok(standardize(&x.with_specs(clim.state.clone())?, &clim.state)?.into_data())
}

fn standardized_residuals(x: &FieldBatch, clim: &Climatology) -> Result<Array4<f32>> {
    Ok(residuals(x)?
        .standardize_with(&clim.residual)?
        .fields()
        .data()
        .clone())
}

pub fn train_vae(
    cfg: &VaeConfig,
    train: &FieldBatch,
    clim: &Climatology,
    seed: u64,
) -> Result<(Vae, LossCurve)> {
    let mut vae = Vae::new(
        cfg.clone(),
        train.specs().len(),
        derive_seed(seed, tag::VAE),
    )?;
    let x = standardized_residuals(train, clim)?;
    let curve = vae.fit(
        &x,
        &clim.residual,
        &lat_of(train)?,
        derive_seed(seed, tag::VAE) ^ 1,
    )?;
    Ok((vae, curve))
}

pub fn train_mae(
    cfg: &MaeConfig,
    train: &FieldBatch,
    clim: &Climatology,
    seed: u64,
) -> Result<(Mae, LossCurve)> {
    let mut mae = Mae::new(
        cfg.clone(),
        train.specs().len(),
        derive_seed(seed, tag::MAE),
    )?;
    let x = standardized_states(train, clim)?;
    let curve = mae.fit(
        &x,
        &clim.state,
        &lat_of(train)?,
        derive_seed(seed, tag::MAE) ^ 1,
    )?;
    Ok((mae, curve))
}

/// Architecture of the frame-wise 2D conditioning encoder: the residual
/// autoencoder's layout with the 3D encoder's channel budget, unregularized.
pub fn frames_config(vae: &VaeConfig, mae: &MaeConfig) -> VaeConfig {
    VaeConfig {
        latent_channels: mae.latent_channels,
        hidden: mae.hidden,
        regularizer: Strategy::None,
        gamma: GammaSchedule::Fixed(1.0),
        train: mae.train.clone(),
        ..vae.clone()
    }
}

/// Frame-wise 2D encoder on standardized states.
pub fn train_frames(
    cfg: &RunConfig,
    train: &FieldBatch,
    clim: &Climatology,
    seed: u64,
) -> Result<(Vae, LossCurve)> {
    let mut enc = Vae::new(
        frames_config(&cfg.vae, &cfg.mae),
        train.specs().len(),
        derive_seed(seed, tag::FRAMES),
    )?;
    let x = standardized_states(train, clim)?;
    let curve = enc.fit(
        &x,
        &clim.state,
        &lat_of(train)?,
        derive_seed(seed, tag::FRAMES) ^ 1,
    )?;
    Ok((enc, curve))
}

/// Models with a zero denoiser, enough to encode and decode residuals.
pub fn encoding_models(
    vae: &Vae,
    cond: Conditioner,
    clim: &Climatology,
    k: usize,
) -> ForecastModels {
    ForecastModels {
        vae: vae.clone(),
        cond,
        denoiser: LatentDenoiser::Zero,
        state_specs: clim.state.clone(),
        residual_specs: clim.residual.clone(),
        k,
    }
}

fn frame(x: &Array4<f32>, t: usize) -> Array3<f32> {
    x.index_axis(Axis(0), t).to_owned()
}

/// Residual latents `E(X_{t+1} - X_t)` for every consecutive pair.
fn residual_latents(series: &FieldBatch, models: &ForecastModels) -> Result<Vec<Tensor>> {
    let x = series.data();
    (0..series.times() - 1)
        .map(|t| models.encode_residual(&(&frame(x, t + 1) - &frame(x, t))))
        .collect()
}

/// Training pairs for the denoiser: target `E(X_{t+1} - X_t)`, conditioning
/// from `X_{t-k} .. X_t`, previous latent `E(X_t - X_{t-1})`.
pub fn diffusion_samples(
    series: &FieldBatch,
    models: &ForecastModels,
) -> Result<Vec<DiffusionSample>> {
    let k = models.k;
    if series.times() < k + 2 {
        return Err(shape(format!(
            "{} steps cannot hold a window of {} plus a target",
            series.times(),
            k + 1
        )));
    }
    let z = residual_latents(series, models)?;
    let x = series.data();
    (k..series.times() - 1)
        .map(|t| {
            let window = models.standardize_window(&x.slice(s![t - k..=t, .., .., ..]).to_owned());
            Ok(DiffusionSample {
                target: z[t].clone(),
                zbar: models.cond.encode(&window, false)?,
                zprev: z[t - 1].clone(),
            })
        })
        .collect()
}

pub fn train_denoiser(
    cfg: &DiffusionConfig,
    samples: &[DiffusionSample],
    models: &ForecastModels,
    seed: u64,
) -> Result<(DenoiserNet, LossCurve)> {
    let mut net = new_denoiser(cfg, models, seed)?;
    let curve = net.fit(samples, &cfg.edm, derive_seed(seed, tag::DENOISER) ^ 1)?;
    Ok((net, curve))
}

fn new_denoiser(cfg: &DiffusionConfig, models: &ForecastModels, seed: u64) -> Result<DenoiserNet> {
    DenoiserNet::new(
        cfg.net.clone(),
        models.vae.latent_channels(),
        models.cond.dims(models.k),
        cfg.edm.sigma_data.unwrap_or(0.5),
        derive_seed(seed, tag::DENOISER),
    )
}

/// Evenly spaced window starts in the held-out series.
pub fn case_starts(held_out: usize, k: usize, leads: usize, cases: usize) -> Result<Vec<usize>> {
    let span = k + 1 + leads;
    if held_out < span {
        return Err(config(format!(
            "{held_out} held-out steps, each case needs {span}"
        )));
    }
    let last = held_out - span;
    let mut starts: Vec<usize> = if cases == 1 {
        vec![0]
    } else {
        (0..cases)
            .map(|c| (c * last + (cases - 1) / 2) / (cases - 1))
            .collect()
    };
    starts.dedup();
    Ok(starts)
}

/// One initial condition and its verifying truth `[T, V, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseForecast {
    pub start: usize,
    pub forecast: EnsembleForecast,
    pub truth: Array4<f32>,
}

pub fn forecast_cases(
    models: &ForecastModels,
    sampler: &SamplerConfig,
    fcfg: &ForecastConfig,
    held_out: &FieldBatch,
    starts: &[usize],
    seed: u64,
) -> Result<Vec<CaseForecast>> {
    let k = models.k;
    let x = held_out.data();
    starts
        .iter()
        .enumerate()
        .map(|(c, &t0)| {
            let init = x.slice(s![t0..t0 + k + 1, .., .., ..]).to_owned();
            let truth = x
                .slice(s![t0 + k + 1..t0 + k + 1 + fcfg.lead_times, .., .., ..])
                .to_owned();
            let case_seed = derive_seed(derive_seed(seed, tag::FORECAST), c as u64);
            let forecast = rollout(&init, models, sampler, fcfg, case_seed)?;
            Ok(CaseForecast {
                start: t0,
                forecast,
                truth,
            })
        })
        .collect()
}

pub fn score(
    cases: &[CaseForecast],
    held_out: &FieldBatch,
    cfg: &RunConfig,
    seed: u64,
) -> Result<MetricReport> {
    let names: Vec<String> = held_out.specs().iter().map(|s| s.name.clone()).collect();
    let views: Vec<_> = cases
        .iter()
        .map(|c| (c.forecast.data.view(), c.truth.view()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::VERIFY));
    let mut rep = evaluate(
        &views,
        &names,
        &lat_of(held_out)?,
        cfg.data.hours_per_step,
        cfg.verify.ssr_corrected,
        &mut rng,
    )?;
    rep.config_hash = cfg.hash();
    Ok(rep)
}

/// Variable-averaged scores at one lead, in standardized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadScores {
    pub rmse: f64,
    pub crps: f64,
    pub ssr: f64,
}

pub fn lead_scores(
    cases: &[CaseForecast],
    specs: &[VariableSpec],
    lat: &LatWeights,
    lead: usize,
    ssr_corrected: bool,
) -> Result<LeadScores> {
    if cases.is_empty() {
        return Err(config("no cases to score"));
    }
    let n = cases.len() as f64;
    let (mut rmse, mut crps, mut ssr) = (0.0, 0.0, 0.0);
    for (v, sp) in specs.iter().enumerate() {
        let (mut mse, mut c) = (0.0, 0.0);
        let mut ss = SpreadSkill::default();
        for case in cases {
            let members = case
                .forecast
                .data
                .index_axis(Axis(1), lead)
                .index_axis_move(Axis(1), v);
            let truth = case
                .truth
                .index_axis(Axis(0), lead)
                .index_axis_move(Axis(0), v);
            mse += mse_ensemble_mean(members, truth, lat)?;
            if members.dim().0 >= 2 {
                c += crps_field(members, truth, lat, true)?;
                ss.add(members, truth, lat)?;
            } else {
                c += crps_field(members, truth, lat, false)?;
            }
        }
        rmse += (mse / n).sqrt() / sp.std;
        crps += c / n / sp.std;
        ssr += ss.ratio(ssr_corrected);
    }
    let nv = specs.len() as f64;
    Ok(LeadScores {
        rmse: rmse / nv,
        crps: crps / nv,
        ssr: ssr / nv,
    })
}

/// Encoder latents of held-out residuals against latents sampled by the
/// denoiser for the same transitions, with their decoded errors.
pub fn diagnose(
    models: &ForecastModels,
    sampler: &SamplerConfig,
    held_out: &FieldBatch,
    vcfg: &VerifyConfig,
    seed: u64,
) -> Result<DiffusabilityReport> {
    let net = match &models.denoiser {
        LatentDenoiser::Net(n) => n,
        LatentDenoiser::Zero => return Err(config("diagnostics need a trained denoiser")),
    };
    let k = models.k;
    let samples = diffusion_samples(held_out, models)?;
    let truths_all = residuals(held_out)?.standardize_with(&models.residual_specs)?;
    let truths_all = truths_all.fields().data();
    let to64 = |t: &Tensor| -> Result<Array3<f64>> {
        let s = t.shape();
        Array3::from_shape_vec(
            (s[0], s[1], s[2]),
            t.data().iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| shape(e.to_string()))
    };
    let base = derive_seed(seed, tag::DIAGNOSE);
    let picks: Vec<usize> = (0..vcfg.diagnose_samples)
        .map(|i| i % samples.len())
        .collect();
    let generated: Vec<Array3<f64>> = picks
        .par_iter()
        .enumerate()
        .map(|(i, &j)| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(i as u64 + 1);
            to64(&sample_latent(net, &samples[j], sampler, false, &mut rng)?)
        })
        .collect::<Result<_>>()?;
    let encoder: Vec<Array3<f64>> = picks
        .iter()
        .map(|&j| to64(&samples[j].target))
        .collect::<Result<_>>()?;
    let truths: Vec<Array3<f64>> = picks
        .iter()
        .map(|&j| truths_all.index_axis(Axis(0), j + k).mapv(f64::from))
        .collect();
    let decode = |z: &Array3<f64>| -> Result<Array3<f64>> {
        let (c, h, w) = z.dim();
        let y = models.vae.decode(&Tensor::new(
            vec![1, c, h, w],
            z.iter().map(|&v| v as f32).collect(),
        )?)?;
        let ys = y.shape().to_vec();
        Array3::from_shape_vec(
            (ys[1], ys[2], ys[3]),
            y.data().iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| shape(e.to_string()))
    };
    diffusability_report(
        &encoder,
        &generated,
        &truths,
        &vcfg.band_edges,
        &vcfg.mask_radii,
        decode,
    )
}

/// Conditioning encoders trained once per replicate.
#[derive(Debug, Clone, Default)]
pub struct Conditioners {
    pub mae: Option<Mae>,
    pub frames: Option<Vae>,
}

impl Conditioners {
    pub fn train(
        cfg: &RunConfig,
        kinds: &[CondKind],
        train: &FieldBatch,
        clim: &Climatology,
        seed: u64,
    ) -> Result<Self> {
        let mut out = Self::default();
        if kinds.contains(&CondKind::Mae) {
            out.mae = Some(train_mae(&cfg.mae, train, clim, seed)?.0);
        }
        if kinds.contains(&CondKind::Frames) {
            out.frames = Some(train_frames(cfg, train, clim, seed)?.0);
        }
        Ok(out)
    }

    pub fn get(&self, kind: CondKind) -> Result<Conditioner> {
        let missing = || config(format!("conditioner {} was not trained", kind.name()));
        Ok(match kind {
            CondKind::None => Conditioner::None,
            CondKind::Mae => Conditioner::Mae(self.mae.clone().ok_or_else(missing)?),
            CondKind::Frames => Conditioner::Frames(self.frames.clone().ok_or_else(missing)?),
        })
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub replicate: usize,
    pub seed: u64,
    pub conditioner: CondKind,
    pub regularizer: Strategy,
    pub first: LeadScores,
    pub last: LeadScores,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, replicate: usize, c: CondKind, r: Strategy) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|x| x.replicate == replicate && x.conditioner == c && x.regularizer == r)
    }

    pub fn replicates(&self) -> usize {
        self.rows.iter().map(|r| r.replicate + 1).max().unwrap_or(0)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "replicate,seed,conditioner,regularizer,rmse_first,crps_first,ssr_first,rmse_last,crps_last,ssr_last")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.replicate,
                r.seed,
                r.conditioner.name(),
                r.regularizer.name(),
                r.first.rmse,
                r.first.crps,
                r.first.ssr,
                r.last.rmse,
                r.last.crps,
                r.last.ssr
            )?;
        }
        Ok(())
    }

    /// Replicate-mean first-lead RMSE: one row per conditioner, one column
    /// per regularizer.
    pub fn write_grid_csv<W: std::io::Write>(
        &self,
        mut out: W,
        conds: &[CondKind],
        regs: &[Strategy],
    ) -> std::io::Result<()> {
        let names: Vec<&str> = regs.iter().map(|r| r.name()).collect();
        writeln!(out, "conditioner,{}", names.join(","))?;
        for &c in conds {
            let cells: Vec<String> = regs
                .iter()
                .map(|&r| {
                    let v: Vec<f64> = self
                        .rows
                        .iter()
                        .filter(|x| x.conditioner == c && x.regularizer == r)
                        .map(|x| x.first.rmse)
                        .collect();
                    if v.is_empty() {
                        String::new()
                    } else {
                        (v.iter().sum::<f64>() / v.len() as f64).to_string()
                    }
                })
                .collect();
            writeln!(out, "{},{}", c.name(), cells.join(","))?;
        }
        Ok(())
    }
}

/// One replicate of the grid: data, conditioners and autoencoders are
/// shared; each (conditioner, regularizer) cell gets its own denoiser.
pub fn ablate_replicate(cfg: &RunConfig, replicate: usize, seed: u64) -> Result<Vec<AblationRow>> {
    let v = &cfg.verify;
    let series = gen_data(cfg, seed)?;
    let (train, held_out) = split(cfg, &series)?;
    let clim = Climatology::of(&train)?;
    let conds = Conditioners::train(cfg, &v.conditioners, &train, &clim, seed)?;
    let vaes: Vec<Vae> = v
        .regularizers
        .par_iter()
        .map(|&r| {
            let vcfg = VaeConfig {
                regularizer: r,
                ..cfg.vae.clone()
            };
            Ok(train_vae(&vcfg, &train, &clim, seed)?.0)
        })
        .collect::<Result<_>>()?;
    let lat = lat_of(&held_out)?;
    let starts = case_starts(
        held_out.times(),
        cfg.mae.k,
        cfg.forecast.lead_times,
        v.cases,
    )?;
    let cells: Vec<(CondKind, usize)> = v
        .conditioners
        .iter()
        .flat_map(|&c| (0..vaes.len()).map(move |i| (c, i)))
        .collect();
    cells
        .par_iter()
        .map(|&(c, i)| {
            let mut models = encoding_models(&vaes[i], conds.get(c)?, &clim, cfg.mae.k);
            let samples = diffusion_samples(&train, &models)?;
            let (net, _) = train_denoiser(&cfg.diffusion, &samples, &models, seed)?;
            models.denoiser = LatentDenoiser::Net(net);
            let cases = forecast_cases(
                &models,
                &cfg.sampler,
                &cfg.forecast,
                &held_out,
                &starts,
                seed,
            )?;
            let score = |lead| lead_scores(&cases, &clim.state, &lat, lead, v.ssr_corrected);
            let row = AblationRow {
                replicate,
                seed,
                conditioner: c,
                regularizer: v.regularizers[i],
                first: score(0)?,
                last: score(cfg.forecast.lead_times - 1)?,
            };
            log::info!(
                "replicate {replicate} {} + {}: first-lead rmse {:.4}",
                c.name(),
                row.regularizer.name(),
                row.first.rmse
            );
            Ok(row)
        })
        .collect()
}

/// The full grid over `verify.replicates` seeds starting at `seed`.
pub fn ablate(cfg: &RunConfig, seed: u64) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for r in 0..cfg.verify.replicates {
        rows.extend(ablate_replicate(cfg, r, seed + r as u64)?);
    }
    Ok(AblationTable {
        config_hash: cfg.hash(),
        rows,
    })
}

/// Where each stage keeps its artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn series(&self) -> PathBuf {
        self.dir("data").join("series.pyld")
    }

    pub fn vae(&self) -> PathBuf {
        self.dir("vae").join("vae.pypt")
    }

    pub fn mae(&self) -> PathBuf {
        self.dir("mae").join("mae.pypt")
    }

    pub fn frames(&self) -> PathBuf {
        self.dir("mae").join("frames.pypt")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.dir("diffusion").join("denoiser.pypt")
    }

    pub fn forecast(&self) -> PathBuf {
        self.dir("forecast")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn load_series(path: &Path) -> Result<FieldBatch> {
    require(path)?;
    read_fields(path)
}

pub fn save_series(x: &FieldBatch, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    write_fields(x, path)
}

/// Replaces `into` by the checkpoint at `path`, which must hold exactly the
/// same names and shapes.
pub fn load_checkpoint(into: &mut Params, path: &Path) -> Result<()> {
    require(path)?;
    let loaded = read_params(path)?;
    if loaded.len() != into.len() {
        return Err(config(format!(
            "{}: {} tensors, model has {}",
            path.display(),
            loaded.len(),
            into.len()
        )));
    }
    for (name, t) in into.iter_mut() {
        let l = loaded
            .get(name)
            .map_err(|_| config(format!("{} lacks {name}", path.display())))?;
        if l.shape() != t.shape() {
            return Err(shape(format!(
                "{}: {name} is {:?}, model expects {:?}",
                path.display(),
                l.shape(),
                t.shape()
            )));
        }
        *t = l.clone();
    }
    Ok(())
}

pub fn save_checkpoint(p: &Params, path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    write_params(p, path)
}

/// Restores the autoencoder and conditioning encoder from `layout`; the
/// denoiser slot is left at zero.
pub fn load_encoders(
    cfg: &RunConfig,
    layout: &Layout,
    train: &FieldBatch,
) -> Result<ForecastModels> {
    let clim = Climatology::of(train)?;
    let vars = train.specs().len();
    let mut vae = Vae::new(cfg.vae.clone(), vars, 0)?;
    load_checkpoint(&mut vae.params, &layout.vae())?;
    let cond = match cfg.diffusion.conditioner {
        CondKind::None => Conditioner::None,
        CondKind::Mae => {
            let mut m = Mae::new(cfg.mae.clone(), vars, 0)?;
            load_checkpoint(&mut m.params, &layout.mae())?;
            Conditioner::Mae(m)
        }
        CondKind::Frames => {
            let mut f = Vae::new(frames_config(&cfg.vae, &cfg.mae), vars, 0)?;
            load_checkpoint(&mut f.params, &layout.frames())?;
            Conditioner::Frames(f)
        }
    };
    Ok(encoding_models(&vae, cond, &clim, cfg.mae.k))
}

/// Every model a rollout needs. With `forecast.persistence` no checkpoint
/// is read: the residual is zero and the autoencoder is never consulted.
pub fn load_models(
    cfg: &RunConfig,
    layout: &Layout,
    train: &FieldBatch,
    seed: u64,
) -> Result<ForecastModels> {
    if cfg.forecast.persistence {
        let vae = Vae::new(cfg.vae.clone(), train.specs().len(), 0)?;
        return Ok(encoding_models(
            &vae,
            Conditioner::None,
            &Climatology::of(train)?,
            cfg.mae.k,
        ));
    }
    let mut models = load_encoders(cfg, layout, train)?;
    let mut net = new_denoiser(&cfg.diffusion, &models, seed)?;
    let path = layout.denoiser();
    require(&path)?;
    net.load_params(read_params(&path)?)?;
    models.denoiser = LatentDenoiser::Net(net);
    Ok(models)
}

/// Provenance record written next to every stage's outputs. No wall-clock
/// fields, so reruns reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64, files: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }
}

/// One residual latent sampled for the conditioning of `s`.
pub fn sample_latent(
    net: &DenoiserNet,
    s: &DiffusionSample,
    sampler: &SamplerConfig,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let den = NetDenoiser {
        net,
        zbar: s.zbar.as_ref(),
        prev: &s.zprev,
    };
    let z = if stochastic {
        sample_stochastic(&den, s.target.len(), rng, sampler)?
    } else {
        sample_deterministic(&den, s.target.len(), rng, sampler)?
    };
    Tensor::new(
        s.target.shape().to_vec(),
        z.into_iter().map(|v| v as f32).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseIndex {
    config_hash: String,
    starts: Vec<usize>,
    dirs: Vec<String>,
}

/// Writes each case as its own ensemble directory plus `cases.json`.
pub fn write_cases(
    dir: &Path,
    cases: &[CaseForecast],
    held_out: &FieldBatch,
    cfg: &RunConfig,
) -> Result<Vec<String>> {
    let hash = cfg.hash();
    let mut dirs = Vec::with_capacity(cases.len());
    for (c, case) in cases.iter().enumerate() {
        let name = format!("case_{c:02}");
        case.forecast.write(
            &dir.join(&name),
            held_out.lat(),
            held_out.lon(),
            held_out.specs(),
            &hash,
        )?;
        dirs.push(name);
    }
    let index = CaseIndex {
        config_hash: hash,
        starts: cases.iter().map(|c| c.start).collect(),
        dirs: dirs.clone(),
    };
    std::fs::write(
        dir.join("cases.json"),
        serde_json::to_string_pretty(&index)? + "\n",
    )?;
    Ok(dirs)
}

/// Reads cases written by [`write_cases`], pairing them with truth from the
/// held-out series.
pub fn read_cases(dir: &Path, held_out: &FieldBatch, k: usize) -> Result<Vec<CaseForecast>> {
    let path = dir.join("cases.json");
    require(&path)?;
    let index: CaseIndex = serde_json::from_slice(&std::fs::read(&path)?)?;
    let x = held_out.data();
    index
        .starts
        .iter()
        .zip(&index.dirs)
        .map(|(&t0, d)| {
            let (forecast, _, _) = EnsembleForecast::read(&dir.join(d))?;
            let lo = t0 + k + 1;
            let hi = lo + forecast.lead_times();
            if hi > held_out.times() || forecast.data.dim().2 != held_out.specs().len() {
                return Err(shape(format!("{d} does not fit the held-out series")));
            }
            Ok(CaseForecast {
                start: t0,
                truth: x.slice(s![lo..hi, .., .., ..]).to_owned(),
                forecast,
            })
        })
        .collect()
}
