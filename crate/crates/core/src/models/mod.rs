//! Miniature autoencoders: the residual VAE (with spectral regularizer
//! hooks), the causal 3D masked autoencoder, and a frame-wise 2D encoder
//! used as the conditioning baseline.

mod mae;
mod train;
mod vae;

pub use mae::{Mae, MaeConfig};
pub use train::{train, GammaSchedule, LossCurve, TrainConfig};
pub use vae::{Vae, VaeConfig};

use ndarray::{s, Array4};
use rand::Rng;

use crate::autodiff::{Params, Tensor};
use crate::error::Result;
use crate::grid::{FieldBatch, LatWeights, VariableSpec};

/// He-style normal init for a conv kernel `[O, I, ...]`.
pub(crate) fn init_kernel(p: &mut Params, name: &str, shape: &[usize], rng: &mut impl Rng) {
    let fan_in: usize = shape[1..].iter().product();
    p.normal(name, shape, (1.0 / fan_in as f64).sqrt(), rng);
}

/// Frames `t` of `x` as `[len(ts), V, H, W]`.
pub fn frames(x: &Array4<f32>, ts: &[usize]) -> Tensor {
    let (_, v, h, w) = x.dim();
    let mut data = Vec::with_capacity(ts.len() * v * h * w);
    for &t in ts {
        data.extend(x.slice(s![t, .., .., ..]).iter().copied());
    }
    Tensor::new(vec![ts.len(), v, h, w], data).expect("consistent dims")
}

/// Windows of `len` consecutive frames starting at each of `starts`, as
/// `[len(starts), V, len, H, W]`.
pub fn windows(x: &Array4<f32>, starts: &[usize], len: usize) -> Tensor {
    let (_, v, h, w) = x.dim();
    let mut data = Vec::with_capacity(starts.len() * v * len * h * w);
    for &t0 in starts {
        for c in 0..v {
            for t in t0..t0 + len {
                data.extend(x.slice(s![t, c, .., ..]).iter().copied());
            }
        }
    }
    Tensor::new(vec![starts.len(), v, len, h, w], data).expect("consistent dims")
}

/// Loss weights `[V, H, 1]`: per-variable weight times latitude weight.
pub(crate) fn loss_weights(specs: &[VariableSpec], lat: &LatWeights) -> Tensor {
    let h = lat.len();
    Tensor::from_fn(&[specs.len(), h, 1], |i| {
        (specs[i / h].loss_weight * lat.as_slice()[i % h]) as f32
    })
}

/// Standardized states of a batch, ready for the autoencoders.
pub fn standardized_states(x: &FieldBatch) -> Result<Array4<f32>> {
    Ok(crate::grid::standardize(x, x.specs())?.into_data())
}
