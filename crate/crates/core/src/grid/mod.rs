//! Gridded multivariate fields on an equiangular lat-lon grid.

pub(crate) mod format;
pub(crate) mod synth;

pub use format::{read_fields, read_fields_from, write_fields, write_fields_to, FIELD_MAGIC};
pub use synth::{gen_synthetic, SynthConfig};

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, shape, Result};

/// Metadata and climatology of one variable channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    /// Pressure level in hPa; `None` for surface fields.
    pub level: Option<f64>,
    pub mean: f64,
    pub std: f64,
    pub loss_weight: f64,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, mean: f64, std: f64) -> Self {
        Self {
            name: name.into(),
            level: None,
            mean,
            std,
            loss_weight: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(config(format!(
                "variable {}: std must be positive",
                self.name
            )));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(config(format!(
                "variable {}: negative loss weight",
                self.name
            )));
        }
        if !self.mean.is_finite() {
            return Err(config(format!("variable {}: non-finite mean", self.name)));
        }
        Ok(())
    }
}

pub(crate) fn validate_specs(specs: &[VariableSpec]) -> Result<()> {
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(config(format!("duplicate variable name {}", s.name)));
        }
    }
    Ok(())
}

/// States `X_t` laid out as `(time, variable, lat, lon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch {
    data: Array4<f32>,
    lat: Vec<f64>,
    lon: Vec<f64>,
    specs: Vec<VariableSpec>,
}

impl FieldBatch {
    pub fn new(
        data: Array4<f32>,
        lat: Vec<f64>,
        lon: Vec<f64>,
        specs: Vec<VariableSpec>,
    ) -> Result<Self> {
        let (_, v, h, w) = data.dim();
        if lat.len() != h || lon.len() != w || specs.len() != v {
            return Err(shape(format!(
                "data {:?} vs {} lat, {} lon, {} specs",
                data.dim(),
                lat.len(),
                lon.len(),
                specs.len()
            )));
        }
        if lat.iter().any(|l| !(-90.0..=90.0).contains(l)) {
            return Err(domain("latitudes must lie in [-90, 90]"));
        }
        let increasing = lat.windows(2).all(|p| p[0] < p[1]);
        let decreasing = lat.windows(2).all(|p| p[0] > p[1]);
        if !(increasing || decreasing) {
            return Err(domain("latitudes must be strictly monotone"));
        }
        if lon.iter().any(|l| !l.is_finite()) {
            return Err(domain("non-finite longitude"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(domain("field contains non-finite values"));
        }
        validate_specs(&specs)?;
        Ok(Self {
            data,
            lat,
            lon,
            specs,
        })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    /// `(T, V, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn times(&self) -> usize {
        self.data.dim().0
    }

    /// Same grid and variables with replaced data.
    pub fn with_data(&self, data: Array4<f32>) -> Result<Self> {
        Self::new(data, self.lat.clone(), self.lon.clone(), self.specs.clone())
    }

    pub fn with_specs(&self, specs: Vec<VariableSpec>) -> Result<Self> {
        Self::new(self.data.clone(), self.lat.clone(), self.lon.clone(), specs)
    }

    /// Time slice `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.times() {
            return Err(shape(format!(
                "time range {start}..{end} of {}",
                self.times()
            )));
        }
        self.with_data(self.data.slice(s![start..end, .., .., ..]).to_owned())
    }

    /// One channel of one time step, widened to f64.
    pub fn channel(&self, t: usize, v: usize) -> ndarray::Array2<f64> {
        self.data.slice(s![t, v, .., ..]).mapv(f64::from)
    }

    /// Per-variable mean and std estimated over time and space; keeps names,
    /// levels, and loss weights.
    pub fn estimate_specs(&self) -> Vec<VariableSpec> {
        estimate_specs(&self.data, &self.specs)
    }
}

pub(crate) fn estimate_specs(data: &Array4<f32>, template: &[VariableSpec]) -> Vec<VariableSpec> {
    template
        .iter()
        .enumerate()
        .map(|(v, spec)| {
            let chan = data.index_axis(Axis(1), v);
            let n = chan.len().max(1) as f64;
            let mean = chan.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
            let var = chan
                .iter()
                .map(|&x| (f64::from(x) - mean).powi(2))
                .sum::<f64>()
                / n;
            VariableSpec {
                mean,
                std: var.sqrt().max(1e-8),
                ..spec.clone()
            }
        })
        .collect()
}

/// Area weights proportional to `cos(lat)` with unit mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights(Vec<f64>);

impl LatWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weights of a grid coarsened by `factor` rows (block means).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.0.len() % factor != 0 {
            return Err(shape(format!(
                "{} rows not divisible by {factor}",
                self.0.len()
            )));
        }
        Ok(Self(
            self.0
                .chunks(factor)
                .map(|c| c.iter().sum::<f64>() / factor as f64)
                .collect(),
        ))
    }
}

pub fn lat_weights(lat: &[f64]) -> Result<LatWeights> {
    if lat.is_empty() {
        return Err(domain("latitude list is empty"));
    }
    if let Some(bad) = lat.iter().find(|l| !(l.abs() <= 90.0)) {
        return Err(domain(format!("latitude {bad} outside [-90, 90]")));
    }
    let cos: Vec<f64> = lat.iter().map(|l| l.to_radians().cos().max(0.0)).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if !(mean > 0.0) {
        return Err(domain("all latitudes at the poles; weights undefined"));
    }
    Ok(LatWeights(cos.into_iter().map(|c| c / mean).collect()))
}

/// Equiangular cell-centre latitudes from north to south.
pub fn default_lat(h: usize) -> Vec<f64> {
    (0..h)
        .map(|i| 90.0 - (i as f64 + 0.5) * 180.0 / h as f64)
        .collect()
}

pub fn default_lon(w: usize) -> Vec<f64> {
    (0..w).map(|j| j as f64 * 360.0 / w as f64).collect()
}

fn match_specs<'a>(x: &FieldBatch, specs: &'a [VariableSpec]) -> Result<Vec<&'a VariableSpec>> {
    x.specs
        .iter()
        .map(|s| {
            specs
                .iter()
                .find(|o| o.name == s.name)
                .ok_or_else(|| config(format!("no statistics for variable {}", s.name)))
        })
        .collect()
}

/// Per-channel `(x - mean) / std` using the statistics in `specs`, matched by name.
pub fn standardize(x: &FieldBatch, specs: &[VariableSpec]) -> Result<FieldBatch> {
    let matched = match_specs(x, specs)?;
    let mut data = x.data.clone();
    for (v, spec) in matched.iter().enumerate() {
        let (m, sd) = (spec.mean, spec.std);
        data.index_axis_mut(Axis(1), v)
            .mapv_inplace(|a| ((f64::from(a) - m) / sd) as f32);
    }
    x.with_data(data)
}

pub fn destandardize(x: &FieldBatch, specs: &[VariableSpec]) -> Result<FieldBatch> {
    let matched = match_specs(x, specs)?;
    let mut data = x.data.clone();
    for (v, spec) in matched.iter().enumerate() {
        let (m, sd) = (spec.mean, spec.std);
        data.index_axis_mut(Axis(1), v)
            .mapv_inplace(|a| (f64::from(a) * sd + m) as f32);
    }
    x.with_data(data)
}

/// Time differences `X_{t+1} - X_t`. The carried specs hold residual
/// statistics, not state statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    fields: FieldBatch,
    standardized: bool,
}

impl ResidualBatch {
    pub fn fields(&self) -> &FieldBatch {
        &self.fields
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn specs(&self) -> &[VariableSpec] {
        self.fields.specs()
    }

    /// Standardizes with the residual statistics; no-op if already done.
    pub fn standardize(&self) -> Result<Self> {
        if self.standardized {
            return Ok(self.clone());
        }
        Ok(Self {
            fields: standardize(&self.fields, self.fields.specs())?,
            standardized: true,
        })
    }

    /// Standardizes with externally supplied residual statistics.
    pub fn standardize_with(&self, specs: &[VariableSpec]) -> Result<Self> {
        let raw = if self.standardized {
            destandardize(&self.fields, self.fields.specs())?
        } else {
            self.fields.clone()
        };
        let specs = match_specs(&raw, specs)?.into_iter().cloned().collect();
        let fields = raw.with_specs(specs)?;
        Ok(Self {
            fields: standardize(&fields, fields.specs())?,
            standardized: true,
        })
    }

    pub fn raw(&self) -> Result<FieldBatch> {
        if self.standardized {
            destandardize(&self.fields, self.fields.specs())
        } else {
            Ok(self.fields.clone())
        }
    }
}

pub fn residuals(x: &FieldBatch) -> Result<ResidualBatch> {
    let t = x.times();
    if t < 2 {
        return Err(domain(format!(
            "residuals need at least 2 time steps, got {t}"
        )));
    }
    let d = x.data();
    let diff = &d.slice(s![1.., .., .., ..]) - &d.slice(s![..t - 1, .., .., ..]);
    let specs = estimate_specs(&diff, x.specs());
    Ok(ResidualBatch {
        fields: FieldBatch::new(diff, x.lat.clone(), x.lon.clone(), specs)?,
        standardized: false,
    })
}
