use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::{Scalar, Tensor};
use crate::error::{config, Result};

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    step: u64,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(
        &mut self,
        params: &mut Params<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(config(format!(
                    "gradient shape {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.f64();
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mut xv = x.f64() * (1.0 - self.lr * self.weight_decay);
                xv -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x = T::of(xv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("p", Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(1.5);
        let mut opt = AdamW::new(0.1);
        for _ in 0..5 {
            opt.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn one_step_descends_on_a_parabola() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut p, &grad(2.0)).unwrap();
        let x = p.get("p").unwrap().item();
        assert!(x < 1.0);
        // First Adam step moves by lr regardless of gradient scale.
        assert!((x - 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        // f(a, b) = 3(a - 1)^2 + 0.5(b + 2)^2, minimum 0.
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new(vec![2], vec![4.0, 3.0]).unwrap());
        let mut opt = AdamW::new(0.05);
        let f = |w: &[f64]| 3.0 * (w[0] - 1.0).powi(2) + 0.5 * (w[1] + 2.0).powi(2);
        for _ in 0..200 {
            let w = p.get("w").unwrap().data().to_vec();
            let g = Tensor::new(vec![2], vec![6.0 * (w[0] - 1.0), w[1] + 2.0]).unwrap();
            opt.step(&mut p, &BTreeMap::from([("w".to_string(), g)]))
                .unwrap();
        }
        let loss = f(p.get("w").unwrap().data());
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn decay_shrinks_weights() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(0.1).with_weight_decay(0.5);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert!((p.get("p").unwrap().item() - 1.9).abs() < 1e-12);
    }
}
