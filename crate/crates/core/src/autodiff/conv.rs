//! 3D cross-correlation over `[N, C, T, H, W]`, lowered to a matrix product,
//! with zero padding on time and latitude and circular padding on longitude.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride_t: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    /// Zero frames added before and after the time axis.
    pub pad_t: (usize, usize),
    /// Zero rows added on both latitude edges.
    pub pad_h: usize,
    /// Columns wrapped around on both longitude edges.
    pub pad_w: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride_t: 1,
            stride_h: 1,
            stride_w: 1,
            pad_t: (0, 0),
            pad_h: 0,
            pad_w: 0,
        }
    }
}

impl ConvSpec {
    /// Spatial stride and padding, no temporal padding.
    pub fn spatial(stride: usize, pad: usize) -> Self {
        Self {
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            ..Self::default()
        }
    }

    /// Size-preserving spatial padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::spatial(1, kernel / 2)
    }

    pub fn with_time(mut self, stride_t: usize, pad_t: (usize, usize)) -> Self {
        self.stride_t = stride_t;
        self.pad_t = pad_t;
        self
    }
}

pub(crate) fn out_dims(x: [usize; 5], k: [usize; 5], s: &ConvSpec) -> Result<[usize; 5]> {
    let [n, c, t, h, w] = x;
    let [o, ci, kt, kh, kw] = k;
    if ci != c {
        return Err(shape(format!(
            "kernel expects {ci} input channels, input has {c}"
        )));
    }
    if s.stride_t == 0 || s.stride_h == 0 || s.stride_w == 0 {
        return Err(shape("zero stride"));
    }
    let span = |len: usize, pad: usize, ker: usize, stride: usize, axis: &str| -> Result<usize> {
        if len + pad < ker || ker == 0 {
            return Err(shape(format!(
                "{axis}: kernel {ker} exceeds padded length {}",
                len + pad
            )));
        }
        Ok((len + pad - ker) / stride + 1)
    };
    Ok([
        n,
        o,
        span(t, s.pad_t.0 + s.pad_t.1, kt, s.stride_t, "time")?,
        span(h, 2 * s.pad_h, kh, s.stride_h, "lat")?,
        span(w, 2 * s.pad_w, kw, s.stride_w, "lon")?,
    ])
}

fn lon_index(w: usize, wo: usize, kw: usize, s: &ConvSpec) -> Vec<usize> {
    (0..wo)
        .map(|j| {
            ((j * s.stride_w + kw) as isize - s.pad_w as isize).rem_euclid(w as isize) as usize
        })
        .collect()
}

/// Input index along a zero-padded axis, or `None` inside the padding.
#[inline]
fn padded(o: usize, stride: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

/// Geometry shared by the lowering and its adjoint.
struct Lowering {
    xd: [usize; 5],
    kd: [usize; 5],
    od: [usize; 5],
    lon: Vec<Vec<usize>>,
    spec: ConvSpec,
}

impl Lowering {
    fn new(xd: [usize; 5], kd: [usize; 5], s: &ConvSpec) -> Result<Self> {
        let od = out_dims(xd, kd, s)?;
        let lon = (0..kd[4]).map(|q| lon_index(xd[4], od[4], q, s)).collect();
        Ok(Self {
            xd,
            kd,
            od,
            lon,
            spec: *s,
        })
    }

    fn rows(&self) -> usize {
        self.kd[1..].iter().product()
    }

    fn cols(&self) -> usize {
        self.od[2..].iter().product()
    }

    /// Visits every `(row, output row offset, input row offset)` pair that
    /// lies inside the zero padding's complement, with the row's lon table.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, &[usize])) {
        let [_, c, t, h, w] = self.xd;
        let [_, _, kt, kh, kw] = self.kd;
        let [_, _, to, ho, wo] = self.od;
        let s = &self.spec;
        for ic in 0..c {
            for a in 0..kt {
                for p in 0..kh {
                    for (q, lon) in self.lon.iter().enumerate() {
                        let row = ((ic * kt + a) * kh + p) * kw + q;
                        for tt in 0..to {
                            let Some(ti) = padded(tt, s.stride_t, a, s.pad_t.0, t) else {
                                continue;
                            };
                            for hh in 0..ho {
                                let Some(hi) = padded(hh, s.stride_h, p, s.pad_h, h) else {
                                    continue;
                                };
                                f(row, (tt * ho + hh) * wo, ((ic * t + ti) * h + hi) * w, lon);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix `[C*kt*kh*kw, To*Ho*Wo]` of sample `b`.
    fn im2col<T: Scalar>(&self, x: &[T], b: usize) -> Array2<T> {
        let sample: usize = self.xd[1..].iter().product();
        let xb = &x[b * sample..(b + 1) * sample];
        let cols = self.cols();
        let mut m = Array2::zeros((self.rows(), cols));
        let buf = m.as_slice_mut().expect("standard layout");
        self.for_each_row(|row, out_off, in_off, lon| {
            let src = &xb[in_off..];
            let dst = &mut buf[row * cols + out_off..][..lon.len()];
            for (d, &j) in dst.iter_mut().zip(lon) {
                *d = src[j];
            }
        });
        m
    }

    /// Adds the patch-matrix gradient `dm` back onto the input gradient of sample `b`.
    fn col2im<T: Scalar>(&self, dm: &Array2<T>, dx: &mut [T], b: usize) {
        let sample: usize = self.xd[1..].iter().product();
        let dxb = &mut dx[b * sample..(b + 1) * sample];
        let cols = self.cols();
        let buf = dm.as_slice().expect("standard layout");
        self.for_each_row(|row, out_off, in_off, lon| {
            let src = &buf[row * cols + out_off..][..lon.len()];
            let dst = &mut dxb[in_off..];
            for (&g, &j) in src.iter().zip(lon) {
                dst[j] += g;
            }
        });
    }
}

fn kernel_matrix<T: Scalar>(k: &[T], kd: [usize; 5]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((kd[0], kd[1..].iter().product()), k).expect("kernel size checked")
}

pub(crate) fn forward<T: Scalar>(
    x: &[T],
    xd: [usize; 5],
    k: &[T],
    kd: [usize; 5],
    s: &ConvSpec,
) -> Result<(Vec<T>, [usize; 5])> {
    let low = Lowering::new(xd, kd, s)?;
    let od = low.od;
    let km = kernel_matrix(k, kd);
    let per = od[1] * low.cols();
    let mut out = vec![T::zero(); od[0] * per];
    for b in 0..xd[0] {
        let cols = low.im2col(x, b);
        let mut ob =
            ArrayViewMut2::from_shape((od[1], low.cols()), &mut out[b * per..(b + 1) * per])
                .expect("sized");
        general_mat_mul(T::one(), &km, &cols, T::zero(), &mut ob);
    }
    Ok((out, od))
}

/// Gradients with respect to the input and the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    xd: [usize; 5],
    k: &[T],
    kd: [usize; 5],
    s: &ConvSpec,
    dy: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Vec<T>, Vec<T>) {
    let low = Lowering::new(xd, kd, s).expect("validated in forward");
    let km = kernel_matrix(k, kd);
    let per = low.od[1] * low.cols();
    let mut dx = if want_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dk = Array2::<T>::zeros(km.dim());
    for b in 0..xd[0] {
        let g = ArrayView2::from_shape((low.od[1], low.cols()), &dy[b * per..(b + 1) * per])
            .expect("sized");
        if want_dk {
            let cols = low.im2col(x, b);
            general_mat_mul(T::one(), &g, &cols.t(), T::one(), &mut dk);
        }
        if want_dx {
            let dcols = km.t().dot(&g);
            low.col2im(&dcols, &mut dx, b);
        }
    }
    let dk = if want_dk {
        dk.into_raw_vec_and_offset().0
    } else {
        Vec::new()
    };
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight nested-loop reference with explicit padding.
    fn naive(x: &[f64], xd: [usize; 5], k: &[f64], kd: [usize; 5], s: &ConvSpec) -> Vec<f64> {
        let od = out_dims(xd, kd, s).unwrap();
        let [n, c, t, h, w] = xd;
        let [_, o, to, ho, wo] = od;
        let [_, _, kt, kh, kw] = kd;
        let mut out = vec![0.0; od.iter().product()];
        for b in 0..n {
            for oc in 0..o {
                for tt in 0..to {
                    for hh in 0..ho {
                        for ww in 0..wo {
                            let mut acc = 0.0;
                            for ic in 0..c {
                                for a in 0..kt {
                                    for p in 0..kh {
                                        for q in 0..kw {
                                            let ti =
                                                (tt * s.stride_t + a) as isize - s.pad_t.0 as isize;
                                            let hi =
                                                (hh * s.stride_h + p) as isize - s.pad_h as isize;
                                            let wi =
                                                (ww * s.stride_w + q) as isize - s.pad_w as isize;
                                            if ti < 0
                                                || ti >= t as isize
                                                || hi < 0
                                                || hi >= h as isize
                                            {
                                                continue;
                                            }
                                            let wi = wi.rem_euclid(w as isize) as usize;
                                            let xv = x[(((b * c + ic) * t + ti as usize) * h
                                                + hi as usize)
                                                * w
                                                + wi];
                                            let kv =
                                                k[(((oc * c + ic) * kt + a) * kh + p) * kw + q];
                                            acc += xv * kv;
                                        }
                                    }
                                }
                            }
                            out[(((b * o + oc) * to + tt) * ho + hh) * wo + ww] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            (
                [2, 3, 5, 6, 7],
                [4, 3, 2, 3, 3],
                ConvSpec::same(3).with_time(1, (1, 0)),
            ),
            (
                [1, 2, 6, 8, 8],
                [3, 2, 4, 3, 3],
                ConvSpec::spatial(2, 1).with_time(2, (0, 0)),
            ),
            (
                [1, 2, 3, 5, 9],
                [2, 2, 3, 1, 5],
                ConvSpec::spatial(1, 2).with_time(1, (1, 1)),
            ),
        ];
        for (i, (xd, kd, s)) in cases.into_iter().enumerate() {
            let x = pseudo(xd.iter().product(), i as u64);
            let k = pseudo(kd.iter().product(), 100 + i as u64);
            let (y, _) = forward(&x, xd, &k, kd, &s).unwrap();
            let r = naive(&x, xd, &k, kd, &s);
            let err = y
                .iter()
                .zip(&r)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "case {i}: {err}");
        }
    }

    #[test]
    fn output_dims() {
        let s = ConvSpec::default().with_time(2, (0, 0));
        assert_eq!(
            out_dims([1, 1, 5, 4, 4], [1, 1, 1, 1, 1], &s).unwrap()[2],
            3
        );
        assert_eq!(
            out_dims([1, 1, 6, 4, 4], [1, 1, 2, 1, 1], &s).unwrap()[2],
            3
        );
        assert!(out_dims([1, 2, 5, 4, 4], [1, 1, 1, 1, 1], &s).is_err());
        assert!(out_dims([1, 1, 1, 4, 4], [1, 1, 3, 1, 1], &s).is_err());
    }
}
