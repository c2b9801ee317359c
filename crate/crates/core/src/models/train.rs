use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Binding, Graph, Params, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 2e-3,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid training schedule {self:?}")));
        }
        Ok(())
    }
}

/// How the masking ratio is chosen each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSchedule {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve(pub Vec<f64>);

impl LossCurve {
    pub fn last(&self) -> Option<f64> {
        self.0.last().copied()
    }

    /// Trailing mean over `window` iterations ending at `i`.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.0.len());
        let mut acc = 0.0;
        for (i, &l) in self.0.iter().enumerate() {
            acc += l;
            if i >= window {
                acc -= self.0[i - window];
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,loss")?;
        for (i, l) in self.0.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Runs `cfg.steps` AdamW iterations. `loss` builds the objective for one
/// step from the bound parameters and the step's RNG; every step gets a fresh
/// graph. The trace is a pure function of `(params, cfg, seed, loss)`.
pub fn train(
    params: &mut Params,
    cfg: &TrainConfig,
    seed: u64,
    mut loss: impl FnMut(&mut Graph, &Binding, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<LossCurve> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let b = params.bind(&mut g)?;
        let l = loss(&mut g, &b, &mut rng)?;
        let value = g.value(l).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        let grads = g.backward(l)?;
        opt.step(params, &b.grads(params, &grads))?;
        curve.push(value);
        log::debug!("step {step}: loss {value:.6}");
    }
    Ok(LossCurve(curve))
}
