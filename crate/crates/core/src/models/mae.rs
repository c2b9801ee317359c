use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{train, LossCurve, TrainConfig};
use super::{init_kernel, windows};
use crate::autodiff::{Binding, ConvSpec, Graph, Params, Tensor, Var};
use crate::causal3d::{encode_full, pad_and_mask, CausalStack};
use crate::error::{config, Result};
use crate::grid::{LatWeights, VariableSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    /// Context length; windows hold `k + 1` frames.
    pub k: usize,
    pub hidden: [usize; 2],
    pub latent_channels: usize,
    pub train: TrainConfig,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            k: 4,
            hidden: [16, 32],
            latent_channels: 16,
            train: TrainConfig::default(),
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k % 2 != 0 {
            return Err(config(format!(
                "k must be even and at least 2, got {}",
                self.k
            )));
        }
        if self.latent_channels == 0 || self.hidden.contains(&0) {
            return Err(config("autoencoder widths must be positive"));
        }
        self.train.validate()
    }

    /// Latent frames per window.
    pub fn latent_frames(&self) -> usize {
        1 + self.k / 2
    }
}

/// Causal 3D encoder with a non-causal decoder that reconstructs all `k + 1`
/// frames, the last one from a zeroed input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mae {
    pub cfg: MaeConfig,
    pub vars: usize,
    pub stack: CausalStack,
    pub params: Params,
}

impl Mae {
    pub fn new(cfg: MaeConfig, vars: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [h0, h1] = cfg.hidden;
        let stack = CausalStack::new("mae.enc", vars, &[h0, h1, cfg.latent_channels], true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        stack.init(&mut p, &mut rng);
        init_kernel(
            &mut p,
            "mae.d0.w",
            &[h1, cfg.latent_channels, 3, 3, 3],
            &mut rng,
        );
        p.zeros("mae.d0.b", &[h1]);
        init_kernel(&mut p, "mae.d1.w", &[h0, h1, 1, 3, 3], &mut rng);
        p.zeros("mae.d1.b", &[h0]);
        // Zero output layer: an untrained decoder predicts all zeros.
        p.zeros("mae.d2.w", &[2 * vars, h0, 1, 3, 3]);
        p.zeros("mae.d2.b", &[2 * vars]);
        Ok(Self {
            cfg,
            vars,
            stack,
            params: p,
        })
    }

    /// `[N, C, 1+k/2, h, w]` latents to `[N, V, k+1, H, W]` frames.
    pub fn decode_graph(&self, g: &mut Graph, b: &Binding, z: Var) -> Result<Var> {
        let k = self.cfg.k;
        let same = ConvSpec::same(3);
        let h = g.conv3d(z, b.var("mae.d0.w")?, same.with_time(1, (1, 1)))?;
        let h = g.channel_bias(h, b.var("mae.d0.b")?)?;
        let h = g.silu(h)?;
        let h = g.upsample(h, 2)?;
        let h = g.conv3d(h, b.var("mae.d1.w")?, same)?;
        let h = g.channel_bias(h, b.var("mae.d1.b")?)?;
        let h = g.silu(h)?;
        let h = g.upsample(h, 2)?;
        let y = g.conv3d(h, b.var("mae.d2.w")?, same)?;
        let y = g.channel_bias(y, b.var("mae.d2.b")?)?;
        // Each latent frame predicts two output frames; the first belongs to the padding.
        let y = g.time_unfold(y, 2)?;
        g.slice_time(y, 1, k + 1)
    }

    /// Masked reconstruction loss on windows `x: [N, V, k+1, H, W]`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: &Tensor,
        specs: &[VariableSpec],
        lat: &LatWeights,
    ) -> Result<Var> {
        let padded = g.constant(pad_and_mask(x, true)?)?;
        let z = self.stack.forward_full(g, b, padded)?;
        let rec = self.decode_graph(g, b, z)?;
        let target = g.constant(x.clone())?;
        g.weighted_mse(rec, target, &window_weights(specs, lat))
    }

    /// Per-frame reconstruction MSE (lat-weighted) of windows `x`.
    pub fn frame_errors(
        &self,
        x: &Tensor,
        specs: &[VariableSpec],
        lat: &LatWeights,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let padded = g.constant(pad_and_mask(x, true)?)?;
        let z = self.stack.forward_full(&mut g, &b, padded)?;
        let rec = self.decode_graph(&mut g, &b, z)?;
        let target = g.constant(x.clone())?;
        let w = window_weights(specs, lat);
        (0..=self.cfg.k)
            .map(|t| {
                let p = g.slice_time(rec, t, 1)?;
                let q = g.slice_time(target, t, 1)?;
                let l = g.weighted_mse(p, q, &w)?;
                Ok(g.value(l).item() as f64)
            })
            .collect()
    }

    /// Conditioning latents `[N, C, 1+k/2, h, w]` for windows `x: [N, V, k+1, H, W]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        encode_full(&self.stack, &self.params, x, true)
    }

    /// Trains on standardized states `x: [T, V, H, W]`.
    pub fn fit(
        &mut self,
        x: &Array4<f32>,
        specs: &[VariableSpec],
        lat: &LatWeights,
        seed: u64,
    ) -> Result<LossCurve> {
        let len = self.cfg.k + 1;
        let count = x.dim().0 + 1 - len;
        let cfg = self.cfg.clone();
        let arch = self.clone_arch();
        train(&mut self.params, &cfg.train, seed, |g, b, rng| {
            let starts: Vec<usize> = (0..cfg.train.batch)
                .map(|_| rng.random_range(0..count))
                .collect();
            arch.loss_graph(g, b, &windows(x, &starts, len), specs, lat)
        })
    }

    fn clone_arch(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            vars: self.vars,
            stack: self.stack.clone(),
            params: Params::new(),
        }
    }
}

/// Weights `[V, 1, H, 1]` for `[N, V, T, H, W]` windows.
fn window_weights(specs: &[VariableSpec], lat: &LatWeights) -> Tensor {
    let h = lat.len();
    Tensor::from_fn(&[specs.len(), 1, h, 1], |i| {
        (specs[i / h].loss_weight * lat.as_slice()[i % h]) as f32
    })
}
