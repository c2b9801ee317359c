//! Training targets for the spectral regularizers: variable-aware masked
//! frequency modeling (VA-MFM), fixed frequency masks (FFM), scale
//! equivariance (SE), or nothing.

use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::spectral::{cutoff_for_ratio, field_profile, lowpass, SpectralProfile};

/// Energy ratios drawn uniformly during autoencoder training.
pub const GAMMAS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vamfm,
    Ffm,
    Se,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Se, Strategy::Ffm, Strategy::Vamfm];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vamfm => "vamfm",
            Strategy::Ffm => "ffm",
            Strategy::Se => "se",
            Strategy::None => "none",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::error::config(format!("unknown regularizer {s:?}")))
    }
}

pub fn sample_gamma(rng: &mut impl Rng) -> f64 {
    GAMMAS[rng.random_range(0..GAMMAS.len())]
}

fn check_gamma(gamma: f64) -> Result<usize> {
    GAMMAS
        .iter()
        .position(|&g| g == gamma)
        .ok_or_else(|| domain(format!("gamma {gamma} is not one of {GAMMAS:?}")))
}

/// Input-side radius paired with latent ratio `gamma` under FFM.
pub fn ffm_input_cutoff(gamma: f64) -> Result<f64> {
    const PAIRED: [f64; 4] = [0.05, 0.10, 0.20, 1.0];
    Ok(PAIRED[check_gamma(gamma)?])
}

/// Downsampling factor used by SE training for a drawn `gamma`.
pub fn se_factor(gamma: f64) -> Result<usize> {
    const FACTORS: [usize; 4] = [4, 2, 2, 1];
    Ok(FACTORS[check_gamma(gamma)?])
}

/// Masking decisions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub gamma: f64,
    /// Radius per input variable; `None` leaves the channel untouched.
    pub input_cutoffs: Vec<Option<f64>>,
    /// Radius for every latent channel; `None` leaves the latent untouched.
    pub latent_cutoff: Option<f64>,
    /// SE downsampling factor; 1 elsewhere.
    pub factor: usize,
    pub strategy: Strategy,
}

impl MaskPlan {
    pub fn identity(vars: usize, strategy: Strategy) -> Self {
        Self {
            gamma: 1.0,
            input_cutoffs: vec![None; vars],
            latent_cutoff: None,
            factor: 1,
            strategy,
        }
    }

    /// Plan for `x: [V, H, W]`, computing per-variable profiles from `x` itself.
    pub fn new(strategy: Strategy, x: ArrayView3<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let vars = x.dim().0;
        if gamma == 1.0 || strategy == Strategy::None {
            return Ok(Self {
                gamma,
                ..Self::identity(vars, strategy)
            });
        }
        match strategy {
            Strategy::Vamfm => {
                let profiles = (0..vars)
                    .map(|v| field_profile(x.slice(s![v, .., ..])))
                    .collect::<Result<Vec<_>>>()?;
                Self::from_profiles(&profiles, gamma)
            }
            Strategy::Ffm => {
                let r = ffm_input_cutoff(gamma)?;
                Ok(Self {
                    gamma,
                    input_cutoffs: vec![Some(r); vars],
                    latent_cutoff: Some(gamma),
                    factor: 1,
                    strategy,
                })
            }
            Strategy::Se => Ok(Self {
                gamma,
                factor: se_factor(gamma)?,
                ..Self::identity(vars, strategy)
            }),
            Strategy::None => unreachable!(),
        }
    }

    /// VA-MFM plan from precomputed (for instance dataset-level) profiles.
    pub fn from_profiles(profiles: &[SpectralProfile], gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if gamma == 1.0 {
            return Ok(Self::identity(profiles.len(), Strategy::Vamfm));
        }
        let cutoffs = profiles
            .iter()
            .map(|p| cutoff_for_ratio(p, gamma).map(Some))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gamma,
            input_cutoffs: cutoffs,
            // The latent side reuses the ratio as a radius.
            latent_cutoff: Some(gamma),
            factor: 1,
            strategy: Strategy::Vamfm,
        })
    }

    pub fn apply_input(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        if x.dim().0 != self.input_cutoffs.len() {
            return Err(domain(format!(
                "plan covers {} variables, input has {}",
                self.input_cutoffs.len(),
                x.dim().0
            )));
        }
        let mut out = x.to_owned();
        for (v, r) in self.input_cutoffs.iter().enumerate() {
            if let Some(r) = r {
                let y = lowpass(x.slice(s![v, .., ..]), *r)?;
                out.slice_mut(s![v, .., ..]).assign(&y);
            }
        }
        downsample(out.view(), self.factor)
    }

    pub fn apply_latent(&self, z: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (_, h, w) = z.dim();
        let mut out = z.to_owned();
        if let Some(r) = self.latent_cutoff {
            if h < 2 || w < 2 {
                return Err(domain(format!("latent spatial dims {h}x{w} below 2")));
            }
            for (c, mut plane) in out.outer_iter_mut().enumerate() {
                plane.assign(&lowpass(z.slice(s![c, .., ..]), r)?);
            }
        }
        downsample(out.view(), self.factor)
    }
}

/// Block-mean downsampling of the last two axes.
pub fn downsample(x: ArrayView3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(domain(format!("factor {factor} does not divide {h}x{w}")));
    }
    if factor == 1 {
        return Ok(x.to_owned());
    }
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Array3::from_shape_fn(
        (c, h / factor, w / factor),
        |(k, i, j)| {
            x.slice(s![
                k,
                i * factor..(i + 1) * factor,
                j * factor..(j + 1) * factor
            ])
            .sum()
                * inv
        },
    ))
}

pub fn vamfm_targets(
    x: ArrayView3<f64>,
    z: ArrayView3<f64>,
    gamma: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let plan = MaskPlan::new(Strategy::Vamfm, x, gamma)?;
    Ok((plan.apply_input(x)?, plan.apply_latent(z)?))
}

pub fn ffm_targets(
    x: ArrayView3<f64>,
    z: ArrayView3<f64>,
    gamma: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let plan = MaskPlan::new(Strategy::Ffm, x, gamma)?;
    Ok((plan.apply_input(x)?, plan.apply_latent(z)?))
}

pub fn se_targets(
    x: ArrayView3<f64>,
    z: ArrayView3<f64>,
    factor: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    Ok((downsample(x, factor)?, downsample(z, factor)?))
}
