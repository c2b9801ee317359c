//! EDM-style diffusion: preconditioning, log-normal noise levels, the
//! rho-schedule, Heun samplers with optional churn, and the conditional
//! latent denoiser network.

mod net;

pub use net::{build_condition, DenoiserConfig, DenoiserNet, DiffusionSample, NetDenoiser};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};

/// Training-side noise distribution and data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmConfig {
    /// Fixed data std; `None` estimates it from the training latents.
    pub sigma_data: Option<f64>,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            sigma_data: None,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_noise: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            s_churn: 2.5,
            s_min: 0.75,
            s_max: 68.0,
            s_noise: 1.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("sampler needs at least one step"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) || !(self.rho > 0.0) {
            return Err(config(format!(
                "need 0 < sigma_min < sigma_max and rho > 0, got {} / {} / {}",
                self.sigma_min, self.sigma_max, self.rho
            )));
        }
        if self.s_churn < 0.0 || self.s_noise < 0.0 {
            return Err(config("churn parameters must be non-negative"));
        }
        Ok(())
    }

    pub fn deterministic(&self) -> Self {
        Self {
            s_churn: 0.0,
            ..self.clone()
        }
    }

    /// `steps` noise levels from `sigma_max` down to `sigma_min`, then 0.
    pub fn schedule(&self) -> Vec<f64> {
        let n = self.steps;
        let (a, b) = (
            self.sigma_max.powf(1.0 / self.rho),
            self.sigma_min.powf(1.0 / self.rho),
        );
        let mut s: Vec<f64> = (0..n)
            .map(|i| {
                let f = if n == 1 {
                    0.0
                } else {
                    i as f64 / (n - 1) as f64
                };
                (a + f * (b - a)).powf(self.rho)
            })
            .collect();
        s.push(0.0);
        s
    }

    /// Churn factor applied at noise level `sigma`.
    pub fn churn_gamma(&self, sigma: f64) -> f64 {
        if self.s_churn > 0.0 && (self.s_min..=self.s_max).contains(&sigma) {
            (self.s_churn / self.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// EDM scalings `(c_skip, c_out, c_in, c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) || !(sigma_data > 0.0) {
        return Err(domain(format!(
            "sigma and sigma_data must be positive, got {sigma}, {sigma_data}"
        )));
    }
    let (s2, d2) = (sigma * sigma, sigma_data * sigma_data);
    Ok(Precond {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / (s2 + d2).sqrt(),
        c_in: 1.0 / (s2 + d2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// Loss weight `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Draws a training noise level with `ln(sigma) ~ N(p_mean, p_std^2)`.
pub fn sample_sigma(rng: &mut impl Rng, cfg: &EdmConfig) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

/// Anything that maps a noisy vector at level `sigma` to a clean estimate.
pub trait Denoiser {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], f64) -> Result<Vec<f64>>> Denoiser for F {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self(x, sigma)
    }
}

/// Posterior mean for data `N(mu, diag(cov))`: the exact minimizer of the
/// denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDenoiser {
    pub mu: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianDenoiser {
    pub fn new(mu: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if mu.len() != cov.len() || cov.iter().any(|&c| !(c > 0.0)) {
            return Err(domain(
                "mean and positive diagonal covariance of equal length required",
            ));
        }
        Ok(Self { mu, cov })
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let s2 = sigma * sigma;
        Ok(x.iter()
            .zip(&self.mu)
            .zip(&self.cov)
            .map(|((&x, &m), &c)| m + c / (c + s2) * (x - m))
            .collect())
    }
}

/// `lambda(sigma) |D(z + sigma eps) - z|^2` for one clean vector.
pub fn diffusion_loss(
    den: &impl Denoiser,
    z_clean: &[f64],
    sigma: f64,
    sigma_data: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(sigma > 0.0) || !(sigma_data > 0.0) {
        return Err(domain("sigma and sigma_data must be positive"));
    }
    let noisy: Vec<f64> = z_clean
        .iter()
        .map(|&z| {
            let e: f64 = StandardNormal.sample(rng);
            z + sigma * e
        })
        .collect();
    let d = den.denoise(&noisy, sigma)?;
    let sq: f64 = d.iter().zip(z_clean).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(loss_weight(sigma, sigma_data) * sq)
}

fn check(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "sampler produced non-finite values at step {step}"
        )))
    }
}

/// Heun integration of the probability-flow ODE over the rho-schedule, with
/// EDM churn when `cfg.s_churn > 0`. Noise is drawn for the initial state and,
/// only at churned steps, for the re-injection.
pub fn sample(
    den: &impl Denoiser,
    dim: usize,
    rng: &mut impl Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let sigmas = cfg.schedule();
    let mut x: Vec<f64> = (0..dim)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sigmas[0] * e
        })
        .collect();
    for i in 0..cfg.steps {
        let (s_cur, s_next) = (sigmas[i], sigmas[i + 1]);
        let gamma = cfg.churn_gamma(s_cur);
        let s_hat = s_cur * (1.0 + gamma);
        if gamma > 0.0 {
            let amp = (s_hat * s_hat - s_cur * s_cur).sqrt() * cfg.s_noise;
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += amp * e;
            }
        }
        let d0 = den.denoise(&x, s_hat)?;
        let slope: Vec<f64> = x.iter().zip(&d0).map(|(x, d)| (x - d) / s_hat).collect();
        let h = s_next - s_hat;
        let euler: Vec<f64> = x.iter().zip(&slope).map(|(x, d)| x + h * d).collect();
        x = if s_next > 0.0 {
            let d1 = den.denoise(&euler, s_next)?;
            x.iter()
                .zip(&slope)
                .zip(euler.iter().zip(&d1))
                .map(|((x, d), (e, dn))| x + h * 0.5 * (d + (e - dn) / s_next))
                .collect()
        } else {
            euler
        };
        check(&x, i)?;
    }
    Ok(x)
}

pub fn sample_deterministic(
    den: &impl Denoiser,
    dim: usize,
    rng: &mut impl Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    sample(den, dim, rng, &cfg.deterministic())
}

pub fn sample_stochastic(
    den: &impl Denoiser,
    dim: usize,
    rng: &mut impl Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    sample(den, dim, rng, cfg)
}
