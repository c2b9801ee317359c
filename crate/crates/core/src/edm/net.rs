//! Miniature conditional denoiser: per-part 1x1x1 projections concatenated
//! along time, residual conv blocks with RMS norm and noise-level FiLM, and a
//! 1x1x1 head read at the noisy frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{loss_weight, precondition, sample_sigma, Denoiser, EdmConfig};
use crate::autodiff::{Binding, ConvSpec, Graph, Params, Scalar, Tensor, Var};
use crate::error::{config, shape, Result};
use crate::models::{train, LossCurve, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    /// Number of sinusoid frequencies in the noise embedding.
    pub fourier: usize,
    pub embed: usize,
    pub train: TrainConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 16,
            blocks: 4,
            fourier: 8,
            embed: 32,
            train: TrainConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.fourier == 0 || self.embed == 0 {
            return Err(config("denoiser widths must be positive"));
        }
        self.train.validate()
    }
}

/// Concatenates `(noisy, z_bar frames..., z_prev)` along time.
/// `z_noisy, z_prev: [C, h, w]`, `z_bar: [C, F, h, w]`; result `[C, F + 2, h, w]`.
pub fn build_condition(z_bar: &Tensor, z_prev: &Tensor, z_noisy: &Tensor) -> Result<Tensor> {
    let (ns, ps, bs) = (z_noisy.shape(), z_prev.shape(), z_bar.shape());
    if ns.len() != 3 || ns != ps || bs.len() != 4 || bs[0] != ns[0] || bs[2..] != ns[1..] {
        return Err(shape(format!(
            "condition parts {ns:?}, {bs:?}, {ps:?} disagree"
        )));
    }
    let (c, f, plane) = (ns[0], bs[1], ns[1] * ns[2]);
    let mut out = Vec::with_capacity(c * (f + 2) * plane);
    for ch in 0..c {
        out.extend_from_slice(&z_noisy.data()[ch * plane..(ch + 1) * plane]);
        out.extend_from_slice(&z_bar.data()[ch * f * plane..(ch + 1) * f * plane]);
        out.extend_from_slice(&z_prev.data()[ch * plane..(ch + 1) * plane]);
    }
    Tensor::new(vec![c, f + 2, ns[1], ns[2]], out)
}

/// One training example in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    /// Clean residual latent `[Cz, h, w]`.
    pub target: Tensor,
    /// Conditioning latent frames `[Cm, F, h, w]`, absent for the unconditioned model.
    pub zbar: Option<Tensor>,
    /// Previous residual latent `[Cz, h, w]`.
    pub zprev: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub cfg: DenoiserConfig,
    pub latent_channels: usize,
    /// `(channels, frames)` of the conditioning latent.
    pub cond: Option<(usize, usize)>,
    pub sigma_data: f64,
    /// Std of the conditioning latents, divided out before projection.
    pub cond_scale: f64,
    pub params: Params,
}

fn frequencies(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * 2f64.powf(i as f64 / 2.0)).collect()
}

fn conv3<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    x: Var,
    name: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let y = g.conv3d(x, b.var(&format!("{name}.w"))?, spec)?;
    g.channel_bias(y, b.var(&format!("{name}.b"))?)
}

fn batch_tensor<T: Scalar>(parts: &[&Tensor], scale: f64, lead: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for p in parts {
        data.extend(p.data().iter().map(|&v| T::of(v as f64 / scale)));
    }
    let mut shp = vec![parts.len()];
    shp.extend_from_slice(lead);
    Tensor::new(shp, data)
}

impl DenoiserNet {
    pub fn new(
        cfg: DenoiserConfig,
        latent_channels: usize,
        cond: Option<(usize, usize)>,
        sigma_data: f64,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if latent_channels == 0
            || !(sigma_data > 0.0)
            || cond.is_some_and(|(c, f)| c == 0 || f == 0)
        {
            return Err(config(
                "denoiser needs positive latent channels, sigma_data and condition dims",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, cz, e) = (cfg.width, latent_channels, cfg.embed);
        let mut p = Params::new();
        let kernel = |p: &mut Params, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            crate::models::init_kernel(p, &format!("{name}.w"), shape, rng);
            p.zeros(&format!("{name}.b"), &[shape[0]]);
        };
        kernel(&mut p, "den.in_x", &[d, cz, 1, 1, 1], &mut rng);
        kernel(&mut p, "den.in_prev", &[d, cz, 1, 1, 1], &mut rng);
        if let Some((cm, _)) = cond {
            kernel(&mut p, "den.in_cond", &[d, cm, 1, 1, 1], &mut rng);
        }
        let emb_in = 2 * cfg.fourier;
        p.normal(
            "den.emb.w",
            &[e, emb_in],
            (1.0 / emb_in as f64).sqrt(),
            &mut rng,
        );
        p.zeros("den.emb.b", &[e]);
        for i in 0..cfg.blocks {
            p.ones(&format!("den.b{i}.norm"), &[d]);
            for film in ["scale", "shift"] {
                p.zeros(&format!("den.b{i}.{film}.w"), &[d, e]);
                p.zeros(&format!("den.b{i}.{film}.b"), &[d]);
            }
            kernel(
                &mut p,
                &format!("den.b{i}.conv"),
                &[d, d, 3, 3, 3],
                &mut rng,
            );
        }
        p.ones("den.head.norm", &[d]);
        p.zeros("den.head.w", &[cz, d, 1, 1, 1]);
        p.zeros("den.head.b", &[cz]);
        Ok(Self {
            cfg,
            latent_channels,
            cond,
            sigma_data,
            cond_scale: 1.0,
            params: p,
        })
    }

    /// Frames in the assembled conditioning tensor.
    pub fn frames(&self) -> usize {
        2 + self.cond.map_or(0, |(_, f)| f)
    }

    fn arch(&self) -> Self {
        Self {
            params: Params::new(),
            ..self.clone()
        }
    }

    /// Raw network `F(c_in z', cond, c_noise)`. `x, prev: [N, Cz, 1, h, w]`,
    /// `zbar: [N, Cm, F, h, w]`; output `[N, Cz, 1, h, w]`.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        zbar: Option<Var>,
        prev: Var,
        c_noise: &[f64],
    ) -> Result<Var> {
        let one = ConvSpec::default();
        let mut parts = vec![conv3(g, b, x, "den.in_x", one)?];
        match (zbar, self.cond) {
            (Some(zb), Some(_)) => parts.push(conv3(g, b, zb, "den.in_cond", one)?),
            (None, None) => {}
            _ => return Err(shape("conditioning latent does not match the denoiser")),
        }
        parts.push(conv3(g, b, prev, "den.in_prev", one)?);
        let mut h = g.concat_time(&parts)?;

        let freqs = frequencies(self.cfg.fourier);
        let nf = freqs.len();
        let ff = Tensor::from_fn(&[c_noise.len(), 2 * nf], |i| {
            let (r, j) = (i / (2 * nf), i % (2 * nf));
            let a = std::f64::consts::TAU * freqs[j % nf] * c_noise[r];
            T::of(if j < nf { a.cos() } else { a.sin() })
        });
        let ff = g.constant(ff)?;
        let emb = g.linear(ff, b.var("den.emb.w")?, Some(b.var("den.emb.b")?))?;
        let emb = g.silu(emb)?;

        let spec = ConvSpec::same(3).with_time(1, (1, 1));
        for i in 0..self.cfg.blocks {
            let p = format!("den.b{i}");
            let n = g.rmsnorm(h, b.var(&format!("{p}.norm"))?, 1e-6)?;
            let sc = g.linear(
                emb,
                b.var(&format!("{p}.scale.w"))?,
                Some(b.var(&format!("{p}.scale.b"))?),
            )?;
            let sc = g.add_scalar(sc, 1.0)?;
            let sh = g.linear(
                emb,
                b.var(&format!("{p}.shift.w"))?,
                Some(b.var(&format!("{p}.shift.b"))?),
            )?;
            let n = g.film(n, sc, sh)?;
            let c = conv3(g, b, n, &format!("{p}.conv"), spec)?;
            let c = g.silu(c)?;
            h = g.add(h, c)?;
        }
        let n = g.rmsnorm(h, b.var("den.head.norm")?, 1e-6)?;
        let y = conv3(g, b, n, "den.head", one)?;
        g.slice_time(y, 0, 1)
    }

    /// Preconditioned `D = c_skip z' + c_out F` for a batch of noisy latents
    /// `[N, Cz, 1, h, w]` at per-sample levels `sigmas`. Conditioning inputs
    /// are already scaled.
    fn denoise_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        noisy: &Tensor<T>,
        zbar: Option<Var>,
        prev: Var,
        sigmas: &[f64],
    ) -> Result<Var> {
        let s = noisy.shape().to_vec();
        let per: usize = s[1..].iter().product();
        let pre = sigmas
            .iter()
            .map(|&sg| precondition(sg, self.sigma_data))
            .collect::<Result<Vec<_>>>()?;
        let xin = Tensor::from_fn(&s, |i| T::of(noisy.data()[i].f64() * pre[i / per].c_in));
        let skip = Tensor::from_fn(&s, |i| T::of(noisy.data()[i].f64() * pre[i / per].c_skip));
        let out = Tensor::from_fn(&s, |i| T::of(pre[i / per].c_out));
        let c_noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let xin = g.constant(xin)?;
        let f = self.forward_graph(g, b, xin, zbar, prev, &c_noise)?;
        let out = g.constant(out)?;
        let f = g.mul(f, out)?;
        let skip = g.constant(skip)?;
        g.add(f, skip)
    }

    fn inputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        zbar: &[&Tensor],
        prev: &[&Tensor],
    ) -> Result<(Option<Var>, Var)> {
        let zb = match self.cond {
            Some((cm, f)) => {
                let s = zbar
                    .first()
                    .ok_or_else(|| shape("missing conditioning latent"))?
                    .shape()
                    .to_vec();
                if zbar.len() != prev.len() || s.len() != 4 || s[0] != cm || s[1] != f {
                    return Err(shape(format!(
                        "conditioning latent {s:?}, expected [{cm}, {f}, h, w]"
                    )));
                }
                Some(g.constant(batch_tensor(zbar, self.cond_scale, &s)?)?)
            }
            None => None,
        };
        let ps = prev[0].shape();
        if ps.len() != 3 || ps[0] != self.latent_channels {
            return Err(shape(format!(
                "previous latent {ps:?}, expected [{}, h, w]",
                self.latent_channels
            )));
        }
        let lead = [ps[0], 1, ps[1], ps[2]];
        let pv = g.constant(batch_tensor(prev, self.sigma_data, &lead)?)?;
        Ok((zb, pv))
    }

    /// Weighted denoising loss averaged over the batch: `mean_i lambda(sigma_i) |D_i - z_i|^2 / numel`.
    pub fn loss_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        batch: &[&DiffusionSample],
        edm: &EdmConfig,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let n = batch.len();
        if n == 0 {
            return Err(shape("empty diffusion batch"));
        }
        let ts = batch[0].target.shape().to_vec();
        let lead = [ts[0], 1, ts[1], ts[2]];
        let per: usize = lead.iter().product();
        let sigmas: Vec<f64> = (0..n).map(|_| sample_sigma(rng, edm)).collect();
        let targets: Vec<&Tensor> = batch.iter().map(|s| &s.target).collect();
        let clean: Tensor<T> = batch_tensor(&targets, 1.0, &lead)?;
        let noisy = Tensor::from_fn(clean.shape(), |i| {
            let e: f64 = StandardNormal.sample(rng);
            T::of(clean.data()[i].f64() + sigmas[i / per] * e)
        });
        let zbar: Vec<&Tensor> = batch.iter().filter_map(|s| s.zbar.as_ref()).collect();
        let prev: Vec<&Tensor> = batch.iter().map(|s| &s.zprev).collect();
        let (zb, pv) = self.inputs(g, &zbar, &prev)?;
        let d = self.denoise_graph(g, b, &noisy, zb, pv, &sigmas)?;
        let lambdas: Vec<f64> = sigmas
            .iter()
            .map(|&s| loss_weight(s, self.sigma_data))
            .collect();
        let w = Tensor::new(
            vec![n, 1, 1, 1, 1],
            lambdas.iter().map(|&l| T::of(l)).collect(),
        )?;
        let target = g.constant(clean)?;
        let l = g.weighted_mse(d, target, &w)?;
        g.scale(l, lambdas.iter().sum::<f64>() / n as f64)
    }

    /// Clean estimate for one noisy latent `[Cz, h, w]` (flattened).
    pub fn denoise(
        &self,
        x: &[f64],
        sigma: f64,
        zbar: Option<&Tensor>,
        prev: &Tensor,
    ) -> Result<Vec<f64>> {
        let ps = prev.shape();
        if x.len() != prev.len() {
            return Err(shape(format!(
                "noisy latent of {} values, expected {}",
                x.len(),
                prev.len()
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let (zb, pv) = self.inputs(&mut g, zbar.as_slice(), &[prev])?;
        let noisy = Tensor::new(
            vec![1, ps[0], 1, ps[1], ps[2]],
            x.iter().map(|&v| v as f32).collect(),
        )?;
        let d = self.denoise_graph(&mut g, &b, &noisy, zb, pv, &[sigma])?;
        Ok(g.value(d).data().iter().map(|&v| v as f64).collect())
    }

    /// Trains on `samples`; estimates `sigma_data` and the conditioning scale
    /// first when `edm.sigma_data` is `None`.
    pub fn fit(
        &mut self,
        samples: &[DiffusionSample],
        edm: &EdmConfig,
        seed: u64,
    ) -> Result<LossCurve> {
        if samples.is_empty() {
            return Err(config("no diffusion training samples"));
        }
        match edm.sigma_data {
            Some(sd) => self.sigma_data = sd,
            None => {
                self.sigma_data = pooled_std(samples.iter().map(|s| &s.target)).max(1e-3);
                if self.cond.is_some() {
                    self.cond_scale =
                        pooled_std(samples.iter().filter_map(|s| s.zbar.as_ref())).max(1e-3);
                }
            }
        }
        let me = self.arch();
        let cfg: TrainConfig = self.cfg.train.clone();
        train(&mut self.params, &cfg, seed, |g, b, rng| {
            let batch: Vec<&DiffusionSample> = (0..cfg.batch)
                .map(|_| &samples[rng.random_range(0..samples.len())])
                .collect();
            me.loss_graph(g, b, &batch, edm, rng)
        })
    }

    /// Parameters plus the data scales, for checkpointing.
    pub fn to_params(&self) -> Params {
        let mut p = self.params.clone();
        p.insert("meta.sigma_data", Tensor::scalar(self.sigma_data as f32));
        p.insert("meta.cond_scale", Tensor::scalar(self.cond_scale as f32));
        p
    }

    /// Restores a checkpoint written by [`Self::to_params`] into an
    /// architecture built with matching dimensions.
    pub fn load_params(&mut self, mut p: Params) -> Result<()> {
        self.sigma_data = p.get("meta.sigma_data")?.item() as f64;
        self.cond_scale = p.get("meta.cond_scale")?.item() as f64;
        let mut fresh = Params::new();
        for (name, t) in self.params.iter() {
            let loaded = p
                .get_mut(name)
                .ok_or_else(|| config(format!("checkpoint lacks {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(shape(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            fresh.insert(name.clone(), loaded.clone());
        }
        self.params = fresh;
        Ok(())
    }
}

fn pooled_std<'a>(ts: impl Iterator<Item = &'a Tensor>) -> f64 {
    let (mut n, mut s, mut s2) = (0usize, 0f64, 0f64);
    for t in ts {
        for &v in t.data() {
            n += 1;
            s += v as f64;
            s2 += (v as f64).powi(2);
        }
    }
    if n < 2 {
        return 0.0;
    }
    let mean = s / n as f64;
    ((s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64).sqrt()
}

/// A trained network bound to one conditioning context.
pub struct NetDenoiser<'a> {
    pub net: &'a DenoiserNet,
    pub zbar: Option<&'a Tensor>,
    pub prev: &'a Tensor,
}

impl Denoiser for NetDenoiser<'_> {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.net.denoise(x, sigma, self.zbar, self.prev)
    }
}
