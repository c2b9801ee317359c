//! The run configuration: one JSON document covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edm::{DenoiserConfig, EdmConfig, SamplerConfig};
use crate::error::{config, Error, Result};
use crate::forecast::ForecastConfig;
use crate::grid::SynthConfig;
use crate::models::{MaeConfig, VaeConfig};
use crate::regularize::Strategy;

/// Synthetic dataset and its train/test split. The generator seed comes
/// from the run seed, not from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub h: usize,
    pub w: usize,
    /// Time steps in the whole series.
    pub t: usize,
    pub slopes: Vec<f64>,
    pub advection: Vec<[f64; 2]>,
    pub forcing: f64,
    /// Leading steps used for training; the rest is held out.
    pub train_steps: usize,
    pub hours_per_step: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            h: s.h,
            w: s.w,
            t: 96,
            slopes: s.slopes,
            advection: s.advection,
            forcing: s.forcing,
            train_steps: 64,
            hours_per_step: 6.0,
        }
    }
}

impl DataConfig {
    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            h: self.h,
            w: self.w,
            t: self.t,
            slopes: self.slopes.clone(),
            advection: self.advection.clone(),
            forcing: self.forcing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth(0).validate()?;
        if self.h % 4 != 0 || self.w % 4 != 0 {
            return Err(config(format!(
                "grid {}x{} must be divisible by 4",
                self.h, self.w
            )));
        }
        if self.train_steps < 2 || self.train_steps >= self.t {
            return Err(config(format!(
                "train_steps must lie in [2, t), got {} of {}",
                self.train_steps, self.t
            )));
        }
        if !(self.hours_per_step > 0.0) {
            return Err(config("hours_per_step must be positive"));
        }
        Ok(())
    }
}

/// Conditioning source for the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CondKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "2d-cond")]
    Frames,
    #[serde(rename = "3d-mae")]
    Mae,
}

impl CondKind {
    pub const ALL: [CondKind; 3] = [CondKind::None, CondKind::Frames, CondKind::Mae];

    pub fn name(self) -> &'static str {
        match self {
            CondKind::None => "none",
            CondKind::Frames => "2d-cond",
            CondKind::Mae => "3d-mae",
        }
    }
}

impl std::str::FromStr for CondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| config(format!("unknown conditioner {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub conditioner: CondKind,
    pub edm: EdmConfig,
    pub net: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            conditioner: CondKind::Mae,
            edm: EdmConfig::default(),
            net: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Initial conditions drawn from the held-out steps.
    pub cases: usize,
    /// Apply the `(M+1)/M` finite-ensemble factor to the SSR.
    pub ssr_corrected: bool,
    pub band_edges: Vec<f64>,
    pub mask_radii: Vec<f64>,
    /// Latent pairs in the diffusability diagnostic.
    pub diagnose_samples: usize,
    /// Replicates of the ablation grid, seeded `seed, seed+1, ...`.
    pub replicates: usize,
    pub conditioners: Vec<CondKind>,
    pub regularizers: Vec<Strategy>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            cases: 4,
            ssr_corrected: true,
            band_edges: vec![0.0, 0.2, 0.4, 0.6, 0.8, std::f64::consts::SQRT_2],
            mask_radii: vec![0.25, 0.5, 0.75, 1.0, std::f64::consts::SQRT_2],
            diagnose_samples: 64,
            replicates: 3,
            conditioners: CondKind::ALL.to_vec(),
            regularizers: vec![Strategy::None, Strategy::Se, Strategy::Ffm, Strategy::Vamfm],
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.diagnose_samples == 0 || self.replicates == 0 {
            return Err(config(
                "cases, diagnose_samples and replicates must be positive",
            ));
        }
        if self.conditioners.is_empty() || self.regularizers.is_empty() {
            return Err(config("ablation grid is empty"));
        }
        crate::spectral::validate_edges(&self.band_edges)?;
        if self.mask_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(config("mask radii must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub mae: MaeConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerConfig,
    pub forecast: ForecastConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            mae: MaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            sampler: SamplerConfig::default(),
            forecast: ForecastConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Any parse failure is a configuration error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(config(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vae.validate()?;
        self.mae.validate()?;
        self.diffusion.net.validate()?;
        if let Some(sd) = self.diffusion.edm.sigma_data {
            if !(sd > 0.0) {
                return Err(config("sigma_data must be positive"));
            }
        }
        self.sampler.validate()?;
        self.forecast.validate()?;
        self.verify.validate()?;
        if self.data.slopes.len() < 1 {
            return Err(config("need at least one variable"));
        }
        let k = self.mae.k;
        if self.data.train_steps < k + 3 {
            return Err(config(format!(
                "training split of {} steps is shorter than a k={k} window plus target",
                self.data.train_steps
            )));
        }
        let held_out = self.data.t - self.data.train_steps;
        if held_out < k + 1 + self.forecast.lead_times {
            return Err(config(format!(
                "{held_out} held-out steps cannot hold a k+1 = {} window and {} lead times",
                k + 1,
                self.forecast.lead_times
            )));
        }
        Ok(())
    }

    /// Canonical JSON: every field spelled out, keys sorted.
    pub fn canonical_json(&self) -> String {
        // serde_json's map is ordered by key, so a round trip through Value sorts.
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"datta": {}}"#,
            r#"{"data": {"hh": 3}}"#,
            r#"{"sampler": {"stepz": 3}}"#,
            r#"{"vae": {"train": {"lr2": 1}}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn hash_ignores_key_order_and_tracks_values() {
        let a = RunConfig::from_json(
            r#"{"sampler": {"steps": 10, "rho": 5}, "forecast": {"members": 4}}"#,
        )
        .unwrap();
        let b = RunConfig::from_json(
            r#"{"forecast": {"members": 4}, "sampler": {"rho": 5, "steps": 10}}"#,
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn cross_section_checks() {
        let too_long = r#"{"forecast": {"lead_times": 40}}"#;
        assert!(RunConfig::from_json(too_long).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"h": 30}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"diffusion": {"conditioner": "4d"}}"#).is_err());
        let c = RunConfig::from_json(r#"{"diffusion": {"conditioner": "2d-cond"}}"#).unwrap();
        assert_eq!(c.diffusion.conditioner, CondKind::Frames);
    }
}
