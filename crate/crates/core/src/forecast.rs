//! Autoregressive ensemble rollout in latent space: condition on recent
//! states, sample a residual latent, decode and integrate.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{s, Array3, Array4, Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::causal3d::{encode_full, encode_monolithic};
use crate::edm::{
    sample_deterministic, sample_stochastic, DenoiserNet, NetDenoiser, SamplerConfig,
};
use crate::error::{config, shape, Error, Result};
use crate::grid::{read_fields, write_fields, FieldBatch, VariableSpec};
use crate::models::{Mae, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub members: usize,
    pub lead_times: usize,
    /// Churned sampler instead of the deterministic one.
    pub stochastic: bool,
    /// Recompute the conditioning encoder in one pass instead of streaming it.
    pub monolithic: bool,
    pub parallel: bool,
    /// Replace the denoiser by a zero residual (persistence baseline).
    pub persistence: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            members: 8,
            lead_times: 20,
            stochastic: false,
            monolithic: false,
            parallel: true,
            persistence: false,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.lead_times == 0 {
            return Err(config("need at least one member and one lead time"));
        }
        Ok(())
    }
}

/// Source of the conditioning latent `z_bar`.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioner {
    None,
    /// Causal 3D encoder over the window ending at the (masked) target time.
    Mae(Mae),
    /// Frame-wise 2D encoder applied to every other state of the window.
    Frames(Vae),
}

impl Conditioner {
    /// `(channels, frames)` of the conditioning latent for history length `k`.
    pub fn dims(&self, k: usize) -> Option<(usize, usize)> {
        match self {
            Conditioner::None => None,
            Conditioner::Mae(m) => Some((m.cfg.latent_channels, m.cfg.latent_frames())),
            Conditioner::Frames(v) => Some((v.latent_channels(), 1 + k / 2)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Conditioner::None => "none",
            Conditioner::Mae(_) => "3d-mae",
            Conditioner::Frames(_) => "2d-cond",
        }
    }

    /// Conditioning latent `[Cm, F, h, w]` from standardized states
    /// `window: [k+1, V, H, W]` holding `X_{t-k} .. X_t`, for target `t+1`.
    pub fn encode(&self, window: &Array4<f32>, monolithic: bool) -> Result<Option<Tensor>> {
        let (len, v, h, w) = window.dim();
        if len < 3 || len % 2 == 0 {
            return Err(shape(format!(
                "conditioning window needs k+1 states with even k, got {len}"
            )));
        }
        match self {
            Conditioner::None => Ok(None),
            Conditioner::Mae(mae) => {
                // Last k known states, then a placeholder frame for the masked target.
                let mut data = Vec::with_capacity(v * len * h * w);
                for c in 0..v {
                    for t in 1..len {
                        data.extend(window.slice(s![t, c, .., ..]).iter().copied());
                    }
                    data.extend(std::iter::repeat_n(0.0, h * w));
                }
                let x = Tensor::new(vec![1, v, len, h, w], data)?;
                let z = if monolithic {
                    encode_monolithic(&mae.stack, &mae.params, &x, true)?
                } else {
                    encode_full(&mae.stack, &mae.params, &x, true)?
                };
                let zs = z.shape()[1..].to_vec();
                Ok(Some(z.reshape(&zs)?))
            }
            Conditioner::Frames(vae) => {
                let ts: Vec<usize> = (0..len).step_by(2).collect();
                let (mu, _) = vae.encode(&crate::models::frames(window, &ts))?;
                let ms = mu.shape();
                let (f, c, plane) = (ms[0], ms[1], ms[2] * ms[3]);
                let mut out = Vec::with_capacity(mu.len());
                for ch in 0..c {
                    for t in 0..f {
                        out.extend_from_slice(&mu.data()[(t * c + ch) * plane..][..plane]);
                    }
                }
                Ok(Some(Tensor::new(vec![c, f, ms[2], ms[3]], out)?))
            }
        }
    }
}

/// Residual-latent generator used by the rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentDenoiser {
    Net(DenoiserNet),
    /// Always predicts a zero residual; turns the rollout into persistence.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModels {
    pub vae: Vae,
    pub cond: Conditioner,
    pub denoiser: LatentDenoiser,
    pub state_specs: Vec<VariableSpec>,
    pub residual_specs: Vec<VariableSpec>,
    /// History length; the window holds `k+1` states.
    pub k: usize,
}

fn standardize_frame(x: &Array3<f32>, specs: &[VariableSpec]) -> Array3<f32> {
    let mut out = x.clone();
    for (v, sp) in specs.iter().enumerate() {
        out.index_axis_mut(Axis(0), v)
            .mapv_inplace(|a| ((a as f64 - sp.mean) / sp.std) as f32);
    }
    out
}

impl ForecastModels {
    fn check(&self) -> Result<()> {
        if self.state_specs.len() != self.residual_specs.len()
            || self.state_specs.len() != self.vae.vars
        {
            return Err(config(
                "state, residual and autoencoder variable counts differ",
            ));
        }
        if let LatentDenoiser::Net(net) = &self.denoiser {
            if net.cond != self.cond.dims(self.k)
                || net.latent_channels != self.vae.latent_channels()
            {
                return Err(config(format!(
                    "denoiser expects conditioning {:?}, models provide {:?}",
                    net.cond,
                    self.cond.dims(self.k)
                )));
            }
        }
        Ok(())
    }

    /// Mean residual latent `[Cz, h, w]` of the raw residual `delta: [V, H, W]`.
    pub fn encode_residual(&self, delta: &Array3<f32>) -> Result<Tensor> {
        let d = standardize_frame(delta, &self.residual_specs);
        let (v, h, w) = d.dim();
        let (mu, _) = self.vae.encode(&Tensor::new(
            vec![1, v, h, w],
            d.into_raw_vec_and_offset().0,
        )?)?;
        let s = mu.shape()[1..].to_vec();
        mu.reshape(&s)
    }

    /// Raw residual `[V, H, W]` decoded from a latent `[Cz, h, w]`.
    pub fn decode_residual(&self, z: &Tensor) -> Result<Array3<f32>> {
        let mut s = vec![1];
        s.extend_from_slice(z.shape());
        let y = self.vae.decode(&z.clone().reshape(&s)?)?;
        let ys = y.shape();
        let mut out = Array3::from_shape_vec((ys[1], ys[2], ys[3]), y.into_data())
            .map_err(|e| shape(e.to_string()))?;
        for (v, sp) in self.residual_specs.iter().enumerate() {
            out.index_axis_mut(Axis(0), v)
                .mapv_inplace(|a| (a as f64 * sp.std + sp.mean) as f32);
        }
        Ok(out)
    }

    /// Standardized copy of a window of raw states.
    pub fn standardize_window(&self, window: &Array4<f32>) -> Array4<f32> {
        let mut out = window.clone();
        for mut frame in out.outer_iter_mut() {
            let f = standardize_frame(&frame.to_owned(), &self.state_specs);
            frame.assign(&f);
        }
        out
    }
}

/// Everything one ensemble member carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberState {
    /// Raw states `X_{t-k} .. X_t`.
    pub window: VecDeque<Array3<f32>>,
    /// Latent of `X_t - X_{t-1}`.
    pub zprev: Tensor,
}

impl MemberState {
    pub fn new(init: &Array4<f32>, models: &ForecastModels) -> Result<Self> {
        models.check()?;
        let len = init.dim().0;
        if len != models.k + 1 {
            return Err(shape(format!(
                "initial window has {len} states, expected k+1 = {}",
                models.k + 1
            )));
        }
        let window: VecDeque<Array3<f32>> = init.outer_iter().map(|f| f.to_owned()).collect();
        let delta = &window[len - 1] - &window[len - 2];
        let zprev = models.encode_residual(&delta)?;
        Ok(Self { window, zprev })
    }

    pub fn current(&self) -> &Array3<f32> {
        self.window.back().expect("window is never empty")
    }

    fn stacked(&self) -> Array4<f32> {
        let views: Vec<_> = self.window.iter().map(|f| f.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal frame shapes")
    }
}

/// Advances one member by one lead time and returns the new state.
pub fn step(
    state: &mut MemberState,
    models: &ForecastModels,
    sampler: &SamplerConfig,
    cfg: &ForecastConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    let (delta, zprev) = match &models.denoiser {
        // Zero residual: the state carries over exactly.
        LatentDenoiser::Zero => (
            Array3::zeros(state.current().dim()),
            state.zprev.map(|_| 0.0),
        ),
        LatentDenoiser::Net(net) => {
            let dim = state.zprev.len();
            let window = models.standardize_window(&state.stacked());
            let zbar = models.cond.encode(&window, cfg.monolithic)?;
            let den = NetDenoiser {
                net,
                zbar: zbar.as_ref(),
                prev: &state.zprev,
            };
            let z = if cfg.stochastic {
                sample_stochastic(&den, dim, rng, sampler)?
            } else {
                sample_deterministic(&den, dim, rng, sampler)?
            };
            let z = Tensor::new(
                state.zprev.shape().to_vec(),
                z.into_iter().map(|v| v as f32).collect(),
            )?;
            let delta = models.decode_residual(&z)?;
            let zprev = models.encode_residual(&delta)?;
            (delta, zprev)
        }
    };
    let next = state.current() + &delta;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("decoded state is not finite".into()));
    }
    state.zprev = zprev;
    state.window.pop_front();
    state.window.push_back(next.clone());
    Ok(next)
}

/// RNG provenance of one member: a ChaCha8 stream of a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSeed {
    pub seed: u64,
    pub stream: u64,
}

impl MemberSeed {
    /// Member `m` of an ensemble seeded with `seed`.
    pub fn of(seed: u64, m: usize) -> Self {
        Self {
            seed,
            stream: m as u64 + 1,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Raw forecast states `[M, T_lead, V, H, W]` with member provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub data: Array5<f32>,
    pub seeds: Vec<MemberSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub config_hash: String,
    pub members: usize,
    pub lead_times: usize,
    pub seeds: Vec<MemberSeed>,
    pub files: Vec<String>,
}

impl EnsembleForecast {
    pub fn members(&self) -> usize {
        self.data.dim().0
    }

    pub fn lead_times(&self) -> usize {
        self.data.dim().1
    }

    /// One PYLD file per member plus `manifest.json`.
    pub fn write(
        &self,
        dir: &Path,
        lat: &[f64],
        lon: &[f64],
        specs: &[VariableSpec],
        config_hash: &str,
    ) -> Result<ForecastManifest> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.members());
        for (m, member) in self.data.outer_iter().enumerate() {
            let name = format!("member_{m:03}.pyld");
            let fb = FieldBatch::new(
                member.to_owned(),
                lat.to_vec(),
                lon.to_vec(),
                specs.to_vec(),
            )?;
            write_fields(&fb, dir.join(&name))?;
            files.push(name);
        }
        let manifest = ForecastManifest {
            config_hash: config_hash.to_string(),
            members: self.members(),
            lead_times: self.lead_times(),
            seeds: self.seeds.clone(),
            files,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<(Self, ForecastManifest, FieldBatch)> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: ForecastManifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
        let mut members = Vec::with_capacity(manifest.files.len());
        for f in &manifest.files {
            members.push(read_fields(dir.join(f))?);
        }
        let first = members
            .first()
            .ok_or_else(|| config("forecast manifest lists no members"))?
            .clone();
        let views: Vec<_> = members.iter().map(|m| m.data().view()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| shape(e.to_string()))?;
        Ok((
            Self {
                data,
                seeds: manifest.seeds.clone(),
            },
            manifest,
            first,
        ))
    }
}

fn run_member(
    init: &Array4<f32>,
    models: &ForecastModels,
    sampler: &SamplerConfig,
    cfg: &ForecastConfig,
    seed: MemberSeed,
) -> Result<Array4<f32>> {
    let mut state = MemberState::new(init, models)?;
    let mut rng = seed.rng();
    let (_, v, h, w) = init.dim();
    let mut out = Array4::zeros((cfg.lead_times, v, h, w));
    for lead in 0..cfg.lead_times {
        let next = step(&mut state, models, sampler, cfg, &mut rng).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("rollout step {}: {msg}", lead + 1)),
            other => other,
        })?;
        out.index_axis_mut(Axis(0), lead).assign(&next);
    }
    Ok(out)
}

/// Rolls every member forward from the shared raw window `init: [k+1, V, H, W]`.
pub fn rollout_members(
    init: &Array4<f32>,
    models: &ForecastModels,
    sampler: &SamplerConfig,
    cfg: &ForecastConfig,
    seeds: &[MemberSeed],
) -> Result<EnsembleForecast> {
    cfg.validate()?;
    sampler.validate()?;
    let run = |s: &MemberSeed| run_member(init, models, sampler, cfg, *s);
    let members: Vec<Array4<f32>> = if cfg.parallel {
        seeds.par_iter().map(run).collect::<Result<_>>()?
    } else {
        seeds.iter().map(run).collect::<Result<_>>()?
    };
    let views: Vec<_> = members.iter().map(|m| m.view()).collect();
    let data = ndarray::stack(Axis(0), &views).map_err(|e| shape(e.to_string()))?;
    Ok(EnsembleForecast {
        data,
        seeds: seeds.to_vec(),
    })
}

/// `cfg.members` members seeded from `seed`.
pub fn rollout(
    init: &Array4<f32>,
    models: &ForecastModels,
    sampler: &SamplerConfig,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<EnsembleForecast> {
    let seeds: Vec<MemberSeed> = (0..cfg.members).map(|m| MemberSeed::of(seed, m)).collect();
    rollout_members(init, models, sampler, cfg, &seeds)
}
