use std::f64::consts::PI;

use ndarray::{s, Array2, Array4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{default_lat, default_lon, FieldBatch, VariableSpec};
use crate::error::{config, Result};
use crate::spectral::{fft2, ifft2, normalized_radius, signed_frequency, Spectrum2D};

/// Desk-scale stand-in for reanalysis data: per-variable Gaussian random
/// fields advected on a doubly periodic grid with AR(1) forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    /// Amplitude-spectrum slope per variable: `|A(k)| ~ |k|^(-slope)`.
    pub slopes: Vec<f64>,
    /// `(eastward, southward)` displacement in grid cells per step.
    pub advection: Vec<[f64; 2]>,
    /// Innovation std per step in units of the field std, in `[0, 1)`.
    /// The carried state is damped by `sqrt(1 - forcing^2)` to stay stationary.
    pub forcing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let v = 8;
        Self {
            seed: 0,
            h: 64,
            w: 128,
            t: 64,
            slopes: (0..v)
                .map(|i| 1.0 + 2.5 * i as f64 / (v - 1) as f64)
                .collect(),
            advection: vec![
                [1.0, 0.0],
                [-0.5, 0.5],
                [1.5, -0.25],
                [0.75, 0.0],
                [-1.0, 0.5],
                [2.0, 0.0],
                [0.5, -0.5],
                [-1.5, 0.25],
            ],
            forcing: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn variables(&self) -> usize {
        self.slopes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 8 || self.w < 8 {
            return Err(config(format!(
                "grid must be at least 8x8, got {}x{}",
                self.h, self.w
            )));
        }
        if self.t == 0 || self.slopes.is_empty() {
            return Err(config("need at least one time step and one variable"));
        }
        if self.advection.len() != self.slopes.len() {
            return Err(config("one advection velocity per variable required"));
        }
        if self.slopes.iter().any(|s| !s.is_finite())
            || self.advection.iter().flatten().any(|a| !a.is_finite())
        {
            return Err(config("slopes and velocities must be finite"));
        }
        if !(0.0..1.0).contains(&self.forcing) {
            return Err(config("forcing must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Nominal climatology of variable `v`.
    pub fn spec(&self, v: usize) -> VariableSpec {
        const LEVELS: [Option<f64>; 4] = [Some(500.0), Some(850.0), Some(700.0), None];
        VariableSpec {
            name: format!("var{v}"),
            level: LEVELS[v % LEVELS.len()],
            mean: 100.0 + 50.0 * v as f64,
            std: 1.0 + v as f64,
            loss_weight: 1.0,
        }
    }
}

/// Zero-mean, unit-variance random field with amplitude spectrum `r^(-slope)`.
pub(crate) fn random_field(h: usize, w: usize, slope: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = Array2::from_shape_simple_fn((h, w), || StandardNormal.sample(rng));
    let mut s = fft2(noise.view()).expect("finite noise");
    for ((i, j), c) in s.coeffs.indexed_iter_mut() {
        let r = normalized_radius(i, j, h, w);
        *c = if r == 0.0 {
            Complex64::default()
        } else {
            *c * r.powf(-slope)
        };
    }
    let mut field = ifft2(&s);
    let std = (field.iter().map(|x| x * x).sum::<f64>() / field.len() as f64).sqrt();
    if std > 0.0 {
        field.mapv_inplace(|x| x / std);
    }
    field
}

/// Periodic displacement by `(dx, dy)` cells: `out[i, j] = x[i - dy, j - dx]`.
/// Integer displacements are exact index shifts; fractional ones go through
/// a Fourier phase ramp.
pub(crate) fn advect(x: &Array2<f64>, dx: f64, dy: f64) -> Array2<f64> {
    let (h, w) = x.dim();
    if dx.fract() == 0.0 && dy.fract() == 0.0 {
        let sx = (dx as i64).rem_euclid(w as i64) as usize;
        let sy = (dy as i64).rem_euclid(h as i64) as usize;
        return Array2::from_shape_fn((h, w), |(i, j)| x[[(i + h - sy) % h, (j + w - sx) % w]]);
    }
    let mut s: Spectrum2D = fft2(x.view()).expect("finite field");
    for ((i, j), c) in s.coeffs.indexed_iter_mut() {
        let phase = -2.0
            * PI
            * (signed_frequency(i, h) * dy / h as f64 + signed_frequency(j, w) * dx / w as f64);
        *c *= Complex64::from_polar(1.0, phase);
    }
    ifft2(&s)
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FieldBatch> {
    cfg.validate()?;
    let (h, w, t, nv) = (cfg.h, cfg.w, cfg.t, cfg.variables());
    let damping = (1.0 - cfg.forcing * cfg.forcing).sqrt();
    let mut data = Array4::<f32>::zeros((t, nv, h, w));
    for v in 0..nv {
        // One stream per variable keeps variables independent of inventory order.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(v as u64 + 1);
        let spec = cfg.spec(v);
        let [dx, dy] = cfg.advection[v];
        let mut state = random_field(h, w, cfg.slopes[v], &mut rng);
        for ti in 0..t {
            if ti > 0 {
                state = advect(&state, dx, dy);
                if cfg.forcing > 0.0 {
                    let innovation = random_field(h, w, cfg.slopes[v], &mut rng);
                    state.zip_mut_with(&innovation, |a, &b| *a = damping * *a + cfg.forcing * b);
                }
            }
            data.slice_mut(s![ti, v, .., ..])
                .zip_mut_with(&state, |o, &x| *o = (spec.mean + spec.std * x) as f32);
        }
    }
    let specs = (0..nv).map(|v| cfg.spec(v)).collect();
    FieldBatch::new(data, default_lat(h), default_lon(w), specs)
}
