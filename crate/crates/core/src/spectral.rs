//! Two-dimensional Fourier analysis of gridded fields.
//!
//! Frequencies are normalized per axis by the axis Nyquist index, so a
//! coefficient with signed integer frequencies `(u', v')` on an `H x W` grid
//! sits at radius `sqrt((u' / (H/2))^2 + (v' / (W/2))^2)`. Radius 1 is the
//! Nyquist frequency of either axis and the corners reach `sqrt(2)`.
//!
//! Radial profiles bin coefficients into `max(H, W) / 2` equal-width shells
//! over `[0, sqrt(2)]`. The amplitude spectrum `A(r)` is the mean magnitude
//! in each shell, and the cumulative energy `E(r)` is the running sum of `A`
//! normalized by its grand total. Cutoff radii are reported as shell upper
//! edges, so `lowpass(x, cutoff)` keeps exactly the shells counted by `E`.

use std::cell::RefCell;
use std::f64::consts::SQRT_2;
use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{domain, shape, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Full, unshifted 2D spectrum of a real `H x W` field.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2D {
    pub coeffs: Array2<Complex64>,
}

impl Spectrum2D {
    pub fn dims(&self) -> (usize, usize) {
        self.coeffs.dim()
    }

    /// Sum of coefficient magnitudes.
    pub fn total_magnitude(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).sum()
    }
}

fn transform_in_place(buf: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = buf.dim();
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for mut row in buf.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let mut column = vec![Complex64::default(); h];
    let mut scratch = vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[[i, j]];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for i in 0..h {
            buf[[i, j]] = column[i];
        }
    }
}

/// Unnormalized forward transform: a constant field `c` maps to `c * H * W`
/// at the zero frequency.
pub fn fft2(x: ArrayView2<f64>) -> Result<Spectrum2D> {
    let (h, w) = x.dim();
    if h < 2 || w < 2 {
        return Err(shape(format!("fft2 needs at least 2x2, got {h}x{w}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(domain("fft2 input contains non-finite values"));
    }
    let mut buf = Array2::from_shape_fn((h, w), |(i, j)| Complex64::new(x[[i, j]], 0.0));
    transform_in_place(&mut buf, false);
    Ok(Spectrum2D { coeffs: buf })
}

/// Inverse of [`fft2`]; returns the complex field scaled by `1 / (H W)`.
pub fn ifft2_complex(s: &Spectrum2D) -> Array2<Complex64> {
    let (h, w) = s.dims();
    let mut buf = s.coeffs.clone();
    transform_in_place(&mut buf, true);
    let norm = 1.0 / (h * w) as f64;
    buf.mapv_inplace(|c| c * norm);
    buf
}

/// Inverse of [`fft2`] keeping the real part.
pub fn ifft2(s: &Spectrum2D) -> Array2<f64> {
    ifft2_complex(s).mapv(|c| c.re)
}

/// Signed integer frequency of index `i` on an axis of length `n`.
pub fn signed_frequency(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Normalized radius of coefficient `(i, j)` on an `h x w` grid.
pub fn normalized_radius(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let fu = signed_frequency(i, h) / (h as f64 / 2.0);
    let fv = signed_frequency(j, w) / (w as f64 / 2.0);
    (fu * fu + fv * fv).sqrt()
}

/// Equal-width radial binning over `[0, sqrt(2)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellGrid {
    pub count: usize,
    pub width: f64,
}

impl ShellGrid {
    pub fn for_dims(h: usize, w: usize) -> Self {
        let count = (h.max(w) / 2).max(1);
        Self {
            count,
            width: SQRT_2 / count as f64,
        }
    }

    /// Upper edge of shell `k`.
    pub fn upper_edge(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.width
    }

    /// Shell containing radius `r`, consistent with `r < upper_edge(k)`.
    pub fn index(&self, r: f64) -> usize {
        let mut k = (r / self.width) as usize;
        while k > 0 && r < k as f64 * self.width {
            k -= 1;
        }
        while k + 1 < self.count && r >= self.upper_edge(k) {
            k += 1;
        }
        k.min(self.count - 1)
    }
}

/// Radial amplitude spectrum and cumulative energy of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    /// Shell upper edges, ascending.
    pub radii: Vec<f64>,
    /// Mean magnitude per shell.
    pub amplitude: Vec<f64>,
    /// Sum of magnitudes per shell.
    pub totals: Vec<f64>,
    /// Coefficients per shell.
    pub counts: Vec<usize>,
    /// Running sum of `amplitude` over its grand total.
    pub cumulative: Vec<f64>,
    /// Set when the spectrum is identically zero; `cumulative` is then all ones.
    pub degenerate: bool,
}

impl SpectralProfile {
    /// Largest single-shell jump in `E(r)`.
    pub fn max_shell_mass(&self) -> f64 {
        let mut prev = 0.0;
        let mut best: f64 = 0.0;
        for &e in &self.cumulative {
            best = best.max(e - prev);
            prev = e;
        }
        best
    }

    /// Writes `(radius, amplitude, cumulative)` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "radius,amplitude,cumulative")?;
        for ((r, a), e) in self.radii.iter().zip(&self.amplitude).zip(&self.cumulative) {
            writeln!(out, "{r},{a},{e}")?;
        }
        Ok(())
    }
}

pub fn radial_profile(s: &Spectrum2D) -> SpectralProfile {
    let (h, w) = s.dims();
    let grid = ShellGrid::for_dims(h, w);
    let mut totals = vec![0.0; grid.count];
    let mut counts = vec![0usize; grid.count];
    let mut max_shell = 0;
    for ((i, j), c) in s.coeffs.indexed_iter() {
        let k = grid.index(normalized_radius(i, j, h, w));
        totals[k] += c.norm();
        counts[k] += 1;
        max_shell = max_shell.max(k);
    }
    let used = max_shell + 1;
    totals.truncate(used);
    counts.truncate(used);
    let amplitude: Vec<f64> = totals
        .iter()
        .zip(&counts)
        .map(|(&t, &n)| if n == 0 { 0.0 } else { t / n as f64 })
        .collect();
    let grand: f64 = amplitude.iter().sum();
    let degenerate = !(grand > 0.0);
    let cumulative = if degenerate {
        vec![1.0; used]
    } else {
        let mut acc = 0.0;
        let mut e: Vec<f64> = amplitude
            .iter()
            .map(|a| {
                acc += a;
                acc / grand
            })
            .collect();
        // Pin the last entry; rounding can leave it a few ulps short of 1.
        if let Some(last) = e.last_mut() {
            *last = 1.0;
        }
        e
    };
    SpectralProfile {
        radii: (0..used).map(|k| grid.upper_edge(k)).collect(),
        amplitude,
        totals,
        counts,
        cumulative,
        degenerate,
    }
}

/// Profile of a real field, transforming it first.
pub fn field_profile(x: ArrayView2<f64>) -> Result<SpectralProfile> {
    Ok(radial_profile(&fft2(x)?))
}

/// Smallest shell radius whose cumulative energy reaches `gamma`.
pub fn cutoff_for_ratio(p: &SpectralProfile, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(domain(format!(
            "energy ratio must lie in (0, 1], got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(*p.radii.last().expect("profile has at least one shell"));
    }
    let k = p
        .cumulative
        .iter()
        .position(|&e| e >= gamma)
        .unwrap_or(p.cumulative.len() - 1);
    Ok(p.radii[k])
}

/// Zeroes every coefficient with radius `>= r_cut`.
pub fn lowpass_spectrum(s: &mut Spectrum2D, r_cut: f64) {
    let (h, w) = s.dims();
    for ((i, j), c) in s.coeffs.indexed_iter_mut() {
        if normalized_radius(i, j, h, w) >= r_cut {
            *c = Complex64::default();
        }
    }
}

/// Circular low-pass filter keeping frequencies with radius `< r_cut`.
pub fn lowpass(x: ArrayView2<f64>, r_cut: f64) -> Result<Array2<f64>> {
    let mut s = fft2(x)?;
    lowpass_spectrum(&mut s, r_cut);
    Ok(ifft2(&s))
}

/// Per-coefficient energy weights matching the accounting of `E(r)`:
/// each magnitude is divided by its shell population.
fn shell_weighted_magnitudes(s: &Spectrum2D) -> Array2<f64> {
    let (h, w) = s.dims();
    let grid = ShellGrid::for_dims(h, w);
    let mut counts = vec![0usize; grid.count];
    for i in 0..h {
        for j in 0..w {
            counts[grid.index(normalized_radius(i, j, h, w))] += 1;
        }
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let k = grid.index(normalized_radius(i, j, h, w));
        s.coeffs[[i, j]].norm() / counts[k] as f64
    })
}

/// Fraction of spectral energy (in the `E(r)` accounting) at radius `< r_cut`.
pub fn retained_fraction(s: &Spectrum2D, r_cut: f64) -> f64 {
    let (h, w) = s.dims();
    let weights = shell_weighted_magnitudes(s);
    let total: f64 = weights.sum();
    if total <= 0.0 {
        return 1.0;
    }
    let kept: f64 = weights
        .indexed_iter()
        .filter(|((i, j), _)| normalized_radius(*i, *j, h, w) < r_cut)
        .map(|(_, v)| v)
        .sum();
    kept / total
}

/// Normalized energy per radial band. `edges` are ascending in `[0, sqrt(2)]`;
/// band `b` covers `[edges[b], edges[b + 1])`, the last band also includes its
/// upper edge. Coefficients outside all bands are ignored.
pub fn band_energy(x: ArrayView2<f64>, edges: &[f64]) -> Result<Vec<f64>> {
    validate_edges(edges)?;
    let s = fft2(x)?;
    Ok(band_energy_of(&s, edges))
}

pub(crate) fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(domain("band edges need at least two entries"));
    }
    if edges.windows(2).any(|p| !(p[0] < p[1]))
        || edges[0] < 0.0
        || edges[edges.len() - 1] > SQRT_2 + 1e-12
    {
        return Err(domain(
            "band edges must be strictly ascending within [0, sqrt(2)]",
        ));
    }
    Ok(())
}

pub fn band_energy_of(s: &Spectrum2D, edges: &[f64]) -> Vec<f64> {
    let (h, w) = s.dims();
    let weights = shell_weighted_magnitudes(s);
    let nb = edges.len() - 1;
    let mut acc = vec![0.0; nb];
    for ((i, j), v) in weights.indexed_iter() {
        let r = normalized_radius(i, j, h, w);
        if let Some(b) = band_of(r, edges) {
            acc[b] += v;
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    }
    acc
}

fn band_of(r: f64, edges: &[f64]) -> Option<usize> {
    let nb = edges.len() - 1;
    let last = edges[nb];
    // Radii within rounding of sqrt(2) belong to the top band when it ends there.
    let tol = if (last - SQRT_2).abs() < 1e-12 {
        1e-12
    } else {
        0.0
    };
    (0..nb).find(|&b| {
        let hi = edges[b + 1];
        r >= edges[b] && (r < hi || (b + 1 == nb && r <= hi + tol))
    })
}
