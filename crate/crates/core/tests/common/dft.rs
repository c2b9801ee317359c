use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

/// Direct double-sum DFT, unnormalized forward convention.
pub fn naive_dft(x: &Array2<f64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(u, v)| {
        let mut acc = Complex64::default();
        for ((i, j), &val) in x.indexed_iter() {
            let phase = -2.0 * PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
            acc += val * Complex64::from_polar(1.0, phase);
        }
        acc
    })
}

/// Max coefficient deviation relative to the largest oracle magnitude.
pub fn max_rel_dev(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, c| m.max(c.norm())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (p, q)| m.max((p - q).norm()))
        / scale
}
