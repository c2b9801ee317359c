use ndarray::{Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::train::{train, GammaSchedule, LossCurve, TrainConfig};
use super::{init_kernel, loss_weights};
use crate::autodiff::{Binding, ConvSpec, Graph, Params, Tensor, Var};
use crate::error::{config, Result};
use crate::grid::{LatWeights, VariableSpec};
use crate::regularize::{sample_gamma, MaskPlan, Strategy};

/// Spatial downsampling of every autoencoder here.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub hidden: [usize; 2],
    /// KL weight.
    pub beta: f64,
    pub regularizer: Strategy,
    pub gamma: GammaSchedule,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            hidden: [16, 32],
            beta: 1e-5,
            regularizer: Strategy::Vamfm,
            gamma: GammaSchedule::Uniform,
            train: TrainConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(config(format!(
                "KL weight must be non-negative, got {}",
                self.beta
            )));
        }
        if self.latent_channels == 0 || self.hidden.contains(&0) {
            return Err(config("autoencoder widths must be positive"));
        }
        self.train.validate()
    }
}

/// Convolutional VAE with a 4x spatial bottleneck and pooled/upsampled
/// shortcuts around both halves.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub vars: usize,
    pub params: Params,
}

fn conv(g: &mut Graph, b: &Binding, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(
        x,
        b.var(&format!("{name}.w"))?,
        ConvSpec::spatial(stride, pad),
    )?;
    g.channel_bias(y, b.var(&format!("{name}.b"))?)
}

impl Vae {
    pub fn new(cfg: VaeConfig, vars: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h0, h1] = cfg.hidden;
        let cz = cfg.latent_channels;
        let mut p = Params::new();
        let layers: [(&str, [usize; 4]); 8] = [
            ("vae.e0", [h0, vars, 3, 3]),
            ("vae.e1", [h1, h0, 3, 3]),
            ("vae.mu", [cz, h1, 3, 3]),
            ("vae.lv", [cz, h1, 3, 3]),
            ("vae.es", [cz, vars, 1, 1]),
            ("vae.d0", [h1, cz, 3, 3]),
            ("vae.d1", [h0, h1, 3, 3]),
            ("vae.d2", [vars, h0, 3, 3]),
        ];
        for (name, shape) in layers {
            init_kernel(&mut p, &format!("{name}.w"), &shape, &mut rng);
            p.zeros(&format!("{name}.b"), &[shape[0]]);
        }
        init_kernel(&mut p, "vae.ds.w", &[vars, cz, 1, 1], &mut rng);
        p.zeros("vae.ds.b", &[vars]);
        // Start with a narrow posterior so early reconstructions are not drowned in noise.
        p.insert("vae.lv.b", Tensor::full(&[cz], -4.0));
        Ok(Self {
            cfg,
            vars,
            params: p,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    /// `x: [N, V, H, W]` to `(mu, logvar)`, each `[N, Cz, H/4, W/4]`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<(Var, Var)> {
        let h = conv(g, b, x, "vae.e0", 2, 1)?;
        let h = g.silu(h)?;
        let h = conv(g, b, h, "vae.e1", 2, 1)?;
        let h = g.silu(h)?;
        let mu = conv(g, b, h, "vae.mu", 1, 1)?;
        let pooled = g.avg_pool(x, DOWNSAMPLE)?;
        let short = conv(g, b, pooled, "vae.es", 1, 0)?;
        let mu = g.add(mu, short)?;
        let lv = conv(g, b, h, "vae.lv", 1, 1)?;
        Ok((mu, lv))
    }

    /// `z: [N, Cz, h, w]` to `[N, V, 4h, 4w]`.
    pub fn decode_graph(&self, g: &mut Graph, b: &Binding, z: Var) -> Result<Var> {
        let h = conv(g, b, z, "vae.d0", 1, 1)?;
        let h = g.silu(h)?;
        let h = g.upsample(h, 2)?;
        let h = conv(g, b, h, "vae.d1", 1, 1)?;
        let h = g.silu(h)?;
        let h = g.upsample(h, 2)?;
        let out = conv(g, b, h, "vae.d2", 1, 1)?;
        let s = conv(g, b, z, "vae.ds", 1, 0)?;
        let s = g.upsample(s, DOWNSAMPLE)?;
        g.add(out, s)
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let xv = g.constant(x.clone())?;
        let (mu, lv) = self.encode_graph(&mut g, &b, xv)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let zv = g.constant(z.clone())?;
        let y = self.decode_graph(&mut g, &b, zv)?;
        Ok(g.value(y).clone())
    }

    /// `mu + exp(logvar / 2) * eps`, computed in `f64`.
    pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut impl Rng) -> Tensor {
        let data = mu
            .data()
            .iter()
            .zip(logvar.data())
            .map(|(&m, &l)| {
                let e: f64 = StandardNormal.sample(rng);
                (m as f64 + (0.5 * l as f64).exp() * e) as f32
            })
            .collect();
        Tensor::new(mu.shape().to_vec(), data).expect("same shape")
    }

    /// Masked reconstruction loss plus `beta * KL` for a batch `x: [N, V, H, W]`
    /// of standardized residuals under `strategy` at ratio `gamma`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: &Tensor,
        specs: &[VariableSpec],
        lat: &LatWeights,
        strategy: Strategy,
        gamma: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let s = x.shape().to_vec();
        let (n, v, h, w) = (s[0], s[1], s[2], s[3]);
        let x64 =
            Array4::from_shape_vec((n, v, h, w), x.data().iter().map(|&a| a as f64).collect())
                .map_err(|e| crate::error::shape(e.to_string()))?;
        let mut targets: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut plan = None;
        for i in 0..n {
            let xi: ArrayView3<f64> = x64.index_axis(ndarray::Axis(0), i);
            let p = MaskPlan::new(strategy, xi, gamma)?;
            targets.push(p.apply_input(xi)?);
            plan = Some(p);
        }
        let plan = plan.ok_or_else(|| crate::error::shape("empty batch"))?;
        let (th, tw) = (targets[0].dim().1, targets[0].dim().2);
        let tdata: Vec<f32> = targets
            .iter()
            .flat_map(|t| t.iter().map(|&a| a as f32))
            .collect();
        let target = g.constant(Tensor::new(vec![n, v, th, tw], tdata)?)?;

        let xv = g.constant(x.clone())?;
        let (mu, lv) = self.encode_graph(g, b, xv)?;
        let eps = Tensor::from_fn(g.shape(mu), |_| {
            let e: f64 = StandardNormal.sample(rng);
            e as f32
        });
        let eps = g.constant(eps)?;
        let half = g.scale(lv, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, eps)?;
        let mut z = g.add(mu, noise)?;
        if let Some(r) = plan.latent_cutoff {
            z = g.lowpass(z, r)?;
        }
        if plan.factor > 1 {
            z = g.avg_pool(z, plan.factor)?;
        }
        let rec = self.decode_graph(g, b, z)?;
        let lat = if plan.factor > 1 {
            lat.coarsen(plan.factor)?
        } else {
            lat.clone()
        };
        let recon = g.weighted_mse(rec, target, &loss_weights(specs, &lat))?;
        if self.cfg.beta == 0.0 {
            return Ok(recon);
        }
        let kl = g.kl_normal(mu, lv)?;
        let kl = g.scale(kl, self.cfg.beta)?;
        g.add(recon, kl)
    }

    /// Trains on standardized residual frames `x: [T, V, H, W]`.
    pub fn fit(
        &mut self,
        x: &Array4<f32>,
        specs: &[VariableSpec],
        lat: &LatWeights,
        seed: u64,
    ) -> Result<LossCurve> {
        let cfg = self.cfg.clone();
        let count = x.dim().0;
        let mut gamma_rng = ChaCha8Rng::seed_from_u64(seed);
        gamma_rng.set_stream(2);
        // Graph builders only read the architecture; weights come from the binding.
        let me = Vae {
            cfg: cfg.clone(),
            vars: self.vars,
            params: Params::new(),
        };
        let curve = train(&mut self.params, &cfg.train, seed, |g, b, rng| {
            let idx: Vec<usize> = (0..cfg.train.batch)
                .map(|_| rng.random_range(0..count))
                .collect();
            let gamma = match cfg.gamma {
                GammaSchedule::Uniform => sample_gamma(&mut gamma_rng),
                GammaSchedule::Fixed(v) => v,
            };
            me.loss_graph(
                g,
                b,
                &super::frames(x, &idx),
                specs,
                lat,
                cfg.regularizer,
                gamma,
                rng,
            )
        })?;
        Ok(curve)
    }
}
