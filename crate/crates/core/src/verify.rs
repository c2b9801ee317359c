//! Probabilistic verification: latitude-weighted ensemble-mean RMSE, CRPS,
//! spread-skill ratio, rank histograms, and latent spectral diagnostics.

use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{domain, shape, Result};
use crate::grid::LatWeights;
use crate::spectral::{band_energy, lowpass, validate_edges};

fn check_grid(members: &ArrayView3<f32>, truth: &ArrayView2<f32>, lat: &LatWeights) -> Result<()> {
    let (m, h, w) = members.dim();
    if m == 0 || truth.dim() != (h, w) || lat.len() != h {
        return Err(shape(format!(
            "members {:?}, truth {:?}, {} latitude weights",
            members.dim(),
            truth.dim(),
            lat.len()
        )));
    }
    Ok(())
}

/// Weighted mean over the grid of `f(i, j)` with latitude weights.
fn lat_mean(lat: &LatWeights, h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
    let wts = lat.as_slice();
    let mut acc = 0.0;
    for i in 0..h {
        let row: f64 = (0..w).map(|j| f(i, j)).sum();
        acc += wts[i] * row;
    }
    acc / (wts.iter().sum::<f64>() * w as f64)
}

/// Weighted mean squared error of the ensemble mean: one case, one field.
pub fn mse_ensemble_mean(
    members: ArrayView3<f32>,
    truth: ArrayView2<f32>,
    lat: &LatWeights,
) -> Result<f64> {
    check_grid(&members, &truth, lat)?;
    let (m, h, w) = members.dim();
    let mean = members.mapv(f64::from).sum_axis(Axis(0)) / m as f64;
    Ok(lat_mean(lat, h, w, |i, j| {
        (mean[[i, j]] - truth[[i, j]] as f64).powi(2)
    }))
}

pub fn rmse_ensemble_mean(
    members: ArrayView3<f32>,
    truth: ArrayView2<f32>,
    lat: &LatWeights,
) -> Result<f64> {
    Ok(mse_ensemble_mean(members, truth, lat)?.sqrt())
}

/// `sum_{i,j} |x_i - x_j|` over ordered pairs, via sorting.
fn pair_sum(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    2.0 * s
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - n + 1.0))
        .sum::<f64>()
}

fn check_members(xs: &[f64], y: f64, min: usize) -> Result<()> {
    if xs.len() < min {
        return Err(domain(format!(
            "CRPS needs at least {min} members, got {}",
            xs.len()
        )));
    }
    if !y.is_finite() || xs.iter().any(|x| !x.is_finite()) {
        return Err(domain("CRPS inputs must be finite"));
    }
    Ok(())
}

/// Unbiased ("fair") ensemble CRPS.
pub fn crps_fair(xs: &[f64], y: f64) -> Result<f64> {
    check_members(xs, y, 2)?;
    let m = xs.len() as f64;
    let skill = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    Ok(skill - pair_sum(xs) / (2.0 * m * (m - 1.0)))
}

/// CRPS of the empirical CDF of the members.
pub fn crps_empirical(xs: &[f64], y: f64) -> Result<f64> {
    check_members(xs, y, 1)?;
    let m = xs.len() as f64;
    let skill = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    Ok(skill - pair_sum(xs) / (2.0 * m * m))
}

/// Latitude-weighted mean CRPS over a field.
pub fn crps_field(
    members: ArrayView3<f32>,
    truth: ArrayView2<f32>,
    lat: &LatWeights,
    fair: bool,
) -> Result<f64> {
    check_grid(&members, &truth, lat)?;
    let (m, h, w) = members.dim();
    if fair && m < 2 {
        return Err(domain("fair CRPS needs at least 2 members"));
    }
    let mut vals = Array2::zeros((h, w));
    let mut xs = vec![0.0; m];
    for i in 0..h {
        for j in 0..w {
            for (k, x) in xs.iter_mut().enumerate() {
                *x = members[[k, i, j]] as f64;
            }
            let y = truth[[i, j]] as f64;
            vals[[i, j]] = if fair {
                crps_fair(&xs, y)?
            } else {
                crps_empirical(&xs, y)?
            };
        }
    }
    Ok(lat_mean(lat, h, w, |i, j| vals[[i, j]]))
}

/// Weighted mean over the grid of the unbiased ensemble variance.
pub fn mean_ensemble_variance(members: ArrayView3<f32>, lat: &LatWeights) -> Result<f64> {
    let (m, h, w) = members.dim();
    if m < 2 || lat.len() != h {
        return Err(domain(
            "ensemble variance needs at least 2 members on the weighted grid",
        ));
    }
    let x = members.mapv(f64::from);
    let var = x.var_axis(Axis(0), 1.0);
    Ok(lat_mean(lat, h, w, |i, j| var[[i, j]]))
}

/// Spread and error accumulated over cases, so the ratio is formed from
/// case-averaged variances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpreadSkill {
    pub variance: f64,
    pub mse: f64,
    pub cases: usize,
    pub members: usize,
}

impl SpreadSkill {
    pub fn add(
        &mut self,
        members: ArrayView3<f32>,
        truth: ArrayView2<f32>,
        lat: &LatWeights,
    ) -> Result<()> {
        let m = members.dim().0;
        if self.cases > 0 && m != self.members {
            return Err(shape(format!(
                "ensemble size changed from {} to {m}",
                self.members
            )));
        }
        self.variance += mean_ensemble_variance(members, lat)?;
        self.mse += mse_ensemble_mean(members, truth, lat)?;
        self.cases += 1;
        self.members = m;
        Ok(())
    }

    /// Spread over RMSE; `corrected` applies the `(M+1)/M` finite-ensemble factor.
    pub fn ratio(&self, corrected: bool) -> f64 {
        if self.cases == 0 || self.mse == 0.0 {
            return f64::NAN;
        }
        let m = self.members as f64;
        let factor = if corrected { (m + 1.0) / m } else { 1.0 };
        (factor * self.variance / self.cases as f64).sqrt() / (self.mse / self.cases as f64).sqrt()
    }

    pub fn rmse(&self) -> f64 {
        (self.mse / self.cases as f64).sqrt()
    }
}

/// SSR of a single case.
pub fn spread_skill_ratio(
    members: ArrayView3<f32>,
    truth: ArrayView2<f32>,
    lat: &LatWeights,
) -> Result<f64> {
    let mut s = SpreadSkill::default();
    s.add(members, truth, lat)?;
    Ok(s.ratio(true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub counts: Vec<u64>,
    pub chi_square: f64,
    pub p_value: f64,
}

impl RankHistogram {
    pub fn cases(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rank,count")?;
        for (r, c) in self.counts.iter().enumerate() {
            writeln!(out, "{r},{c}")?;
        }
        Ok(())
    }
}

/// Rank of `y` among `xs`, ties broken uniformly at random.
pub fn rank_of(xs: &[f64], y: f64, rng: &mut impl Rng) -> usize {
    let below = xs.iter().filter(|&&x| x < y).count();
    let ties = xs.iter().filter(|&&x| x == y).count();
    below + rng.random_range(0..=ties)
}

/// Histogram of truth ranks for cases `(members, truth)`, with a chi-square
/// test against the uniform distribution on `M+1` bins.
pub fn rank_histogram<'a>(
    cases: impl IntoIterator<Item = (&'a [f64], f64)>,
    rng: &mut impl Rng,
) -> Result<RankHistogram> {
    let mut members = None;
    let mut ranks = Vec::new();
    for (xs, y) in cases {
        if xs.is_empty() {
            return Err(domain("rank histogram needs at least one member"));
        }
        if *members.get_or_insert(xs.len()) != xs.len() {
            return Err(shape("ensemble size changed between cases"));
        }
        ranks.push(rank_of(xs, y, rng));
    }
    histogram_from_ranks(
        &ranks,
        members.ok_or_else(|| domain("rank histogram needs at least one case"))?,
    )
}

/// Ranks at every grid point of one field, for aggregation across cases.
pub fn field_ranks(
    members: ArrayView3<f32>,
    truth: ArrayView2<f32>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let (m, h, w) = members.dim();
    if truth.dim() != (h, w) || m == 0 {
        return Err(shape("members and truth grids differ"));
    }
    let mut xs = vec![0.0; m];
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            for (k, x) in xs.iter_mut().enumerate() {
                *x = members[[k, i, j]] as f64;
            }
            out.push(rank_of(&xs, truth[[i, j]] as f64, rng));
        }
    }
    Ok(out)
}

/// Histogram from precomputed ranks in `0..=members`.
pub fn histogram_from_ranks(ranks: &[usize], members: usize) -> Result<RankHistogram> {
    let mut counts = vec![0u64; members + 1];
    for &r in ranks {
        *counts
            .get_mut(r)
            .ok_or_else(|| domain(format!("rank {r} exceeds {members}")))? += 1;
    }
    let n = ranks.len() as f64;
    if n == 0.0 {
        return Err(domain("no ranks"));
    }
    let expected = n / counts.len() as f64;
    let chi_square = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    let dist = ChiSquared::new(members as f64).map_err(|e| domain(e.to_string()))?;
    Ok(RankHistogram {
        counts,
        chi_square,
        p_value: 1.0 - dist.cdf(chi_square),
    })
}

/// One long-format metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variable: String,
    pub lead_hours: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
    pub rank_histograms: Vec<(String, RankHistogram)>,
}

impl MetricReport {
    pub fn push(&mut self, variable: &str, lead_hours: f64, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            variable: variable.to_string(),
            lead_hours,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, variable: &str, lead_hours: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && r.lead_hours == lead_hours && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.value.is_finite())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "variable,lead_hours,metric,value")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.variable, r.lead_hours, r.metric, r.value
            )?;
        }
        Ok(())
    }
}

/// One verification case: forecast `[M, T, V, H, W]` and truth `[T, V, H, W]`.
pub type Case<'a> = (ndarray::ArrayView5<'a, f32>, ndarray::ArrayView4<'a, f32>);

/// Scores forecasts against truth, one row per variable, lead and metric.
/// Errors are pooled over cases before the square root; CRPS is averaged;
/// the SSR is formed from case-pooled spread and error.
pub fn evaluate(
    cases: &[Case],
    names: &[String],
    lat: &LatWeights,
    hours_per_step: f64,
    ssr_corrected: bool,
    rng: &mut impl Rng,
) -> Result<MetricReport> {
    let (m, t, v, h, w) = cases
        .first()
        .ok_or_else(|| domain("no cases to evaluate"))?
        .0
        .dim();
    for (f, y) in cases {
        if f.dim() != (m, t, v, h, w) || y.dim() != (t, v, h, w) {
            return Err(shape(format!(
                "forecast {:?} vs truth {:?}",
                f.dim(),
                y.dim()
            )));
        }
    }
    if names.len() != v {
        return Err(shape(format!("{} names for {v} variables", names.len())));
    }
    let n = cases.len() as f64;
    let mut rep = MetricReport::default();
    for (vi, name) in names.iter().enumerate() {
        let mut ranks = Vec::new();
        for ti in 0..t {
            let lead = (ti + 1) as f64 * hours_per_step;
            let (mut mse, mut fair, mut emp) = (0.0, 0.0, 0.0);
            let mut ss = SpreadSkill::default();
            for (f, y) in cases {
                let members = f.index_axis(Axis(1), ti).index_axis_move(Axis(1), vi);
                let truth = y.index_axis(Axis(0), ti).index_axis_move(Axis(0), vi);
                mse += mse_ensemble_mean(members, truth, lat)?;
                emp += crps_field(members, truth, lat, false)?;
                if m >= 2 {
                    fair += crps_field(members, truth, lat, true)?;
                    ss.add(members, truth, lat)?;
                }
                ranks.extend(field_ranks(members, truth, rng)?);
            }
            rep.push(name, lead, "rmse_mean", (mse / n).sqrt());
            if m >= 2 {
                rep.push(name, lead, "crps_fair", fair / n);
                rep.push(name, lead, "ssr", ss.ratio(ssr_corrected));
            }
            rep.push(name, lead, "crps_empirical", emp / n);
        }
        rep.rank_histograms
            .push((name.clone(), histogram_from_ranks(&ranks, m)?));
    }
    Ok(rep)
}

/// Per-band normalized energies of two latent families and the decoded
/// error under progressive low-pass masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusabilityReport {
    pub band_edges: Vec<f64>,
    pub encoder_energy: Vec<f64>,
    pub generated_energy: Vec<f64>,
    pub mask_radii: Vec<f64>,
    pub encoder_rmse: Vec<f64>,
    pub generated_rmse: Vec<f64>,
}

/// Band fractions averaged over latents `[C, h, w]` and their channels.
pub fn mean_band_energy(latents: &[Array3<f64>], edges: &[f64]) -> Result<Vec<f64>> {
    validate_edges(edges)?;
    let mut acc = vec![0.0; edges.len() - 1];
    let mut n = 0usize;
    for z in latents {
        for ch in z.outer_iter() {
            for (a, e) in acc.iter_mut().zip(band_energy(ch, edges)?) {
                *a += e;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(domain("no latents to analyse"));
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

fn lowpass_latent(z: &Array3<f64>, r: f64) -> Result<Array3<f64>> {
    let mut out = z.clone();
    for (mut o, c) in out.outer_iter_mut().zip(z.outer_iter()) {
        o.assign(&lowpass(c, r)?);
    }
    Ok(out)
}

/// `decode` maps a latent to a field comparable with the matching entry of
/// `truths`; errors are plain RMS over all values, averaged over latents.
pub fn diffusability_report(
    encoder: &[Array3<f64>],
    generated: &[Array3<f64>],
    truths: &[Array3<f64>],
    edges: &[f64],
    mask_radii: &[f64],
    decode: impl Fn(&Array3<f64>) -> Result<Array3<f64>>,
) -> Result<DiffusabilityReport> {
    if encoder.len() != truths.len() || generated.len() != truths.len() {
        return Err(shape("latent families and truths must pair up"));
    }
    let rmse_at = |family: &[Array3<f64>], r: f64| -> Result<f64> {
        let mut acc = 0.0;
        for (z, y) in family.iter().zip(truths) {
            let zm = if r >= std::f64::consts::SQRT_2 {
                z.clone()
            } else {
                lowpass_latent(z, r)?
            };
            let d = decode(&zm)?;
            if d.dim() != y.dim() {
                return Err(shape("decoded field does not match truth"));
            }
            acc += ((&d - y).mapv(|e| e * e).mean().unwrap_or(0.0)).sqrt();
        }
        Ok(acc / family.len() as f64)
    };
    Ok(DiffusabilityReport {
        band_edges: edges.to_vec(),
        encoder_energy: mean_band_energy(encoder, edges)?,
        generated_energy: mean_band_energy(generated, edges)?,
        mask_radii: mask_radii.to_vec(),
        encoder_rmse: mask_radii
            .iter()
            .map(|&r| rmse_at(encoder, r))
            .collect::<Result<_>>()?,
        generated_rmse: mask_radii
            .iter()
            .map(|&r| rmse_at(generated, r))
            .collect::<Result<_>>()?,
    })
}

impl DiffusabilityReport {
    pub fn write_band_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "band_lo,band_hi,encoder,generated")?;
        for (b, p) in self.band_edges.windows(2).enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                p[0], p[1], self.encoder_energy[b], self.generated_energy[b]
            )?;
        }
        Ok(())
    }

    pub fn write_mask_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "mask_radius,encoder_rmse,generated_rmse")?;
        for (i, r) in self.mask_radii.iter().enumerate() {
            writeln!(
                out,
                "{r},{},{}",
                self.encoder_rmse[i], self.generated_rmse[i]
            )?;
        }
        Ok(())
    }
}

/// Minimal SVG line chart; the data table rides along in a comment.
pub fn svg_lines(title: &str, x: &[f64], series: &[(&str, &[f64])]) -> String {
    let (wd, ht, pad) = (480.0, 300.0, 40.0);
    let all: Vec<f64> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = if lo < hi {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    };
    let (x0, x1) = (
        x.first().copied().unwrap_or(0.0),
        x.last().copied().unwrap_or(1.0),
    );
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |v: f64| pad + (v - x0) / span * (wd - 2.0 * pad);
    let py = |v: f64| ht - pad - (v - lo) / (hi - lo) * (ht - 2.0 * pad);
    let colors = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{wd}\" height=\"{ht}\">\n<!--\nx"
    );
    for (name, _) in series {
        s.push_str(&format!(",{name}"));
    }
    for (i, xv) in x.iter().enumerate() {
        s.push_str(&format!("\n{xv}"));
        for (_, ys) in series {
            s.push_str(&format!(",{}", ys.get(i).copied().unwrap_or(f64::NAN)));
        }
    }
    s.push_str("\n-->\n");
    s.push_str(&format!(
        "<text x=\"{pad}\" y=\"20\" font-size=\"14\">{title}</text>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n",
        ht - pad,
        wd - pad
    ));
    s.push_str(&format!(
        "<text x=\"2\" y=\"{}\" font-size=\"10\">{lo:.3}</text>\n<text x=\"2\" y=\"{}\" font-size=\"10\">{hi:.3}</text>\n",
        ht - pad,
        pad
    ));
    for (k, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = x
            .iter()
            .zip(ys.iter())
            .filter(|(_, y)| y.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let c = colors[k % colors.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{c}\">{name}</text>\n",
            wd - pad - 80.0,
            pad + 12.0 * k as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}
