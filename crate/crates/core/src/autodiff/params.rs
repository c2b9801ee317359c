//! Named parameter sets and the `PYPT0001` checkpoint container.
//!
//! Layout, all little-endian: 8-byte magic; `u32` tensor count; per tensor a
//! `u16` name length, UTF-8 name, `u8` rank, `rank` `u32` dims, then the
//! `f32` payload. Tensors are stored in name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{config, Error, Result};
use crate::grid::format::{put_name, Cursor};

pub const PARAM_MAGIC: &[u8; 8] = b"PYPT0001";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(std * z)
        });
        self.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, T::one()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Binding> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.map {
            vars.insert(name.clone(), g.param(t.clone())?);
        }
        Ok(Binding { vars })
    }

    /// Registers every tensor as a constant (frozen) leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<Binding> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.map {
            vars.insert(name.clone(), g.constant(t.clone())?);
        }
        Ok(Binding { vars })
    }
}

/// Name to graph-variable map produced by [`Params::bind`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| config(format!("unknown parameter {name}")))
    }

    /// Gradients of every bound parameter; parameters the loss does not
    /// reach get zeros.
    pub fn grads<T: Scalar>(
        &self,
        params: &Params<T>,
        grads: &Gradients<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params.map[name].shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn write_params_to<W: Write>(p: &Params, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + p.count() * 4);
    buf.extend_from_slice(PARAM_MAGIC);
    let n = u32::try_from(p.len()).map_err(|_| config("too many tensors"))?;
    buf.extend_from_slice(&n.to_le_bytes());
    for (name, t) in p.iter() {
        put_name(&mut buf, name)?;
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| config(format!("dimension {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_params(p: &Params, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_params_to(p, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_params_from(bytes: &[u8]) -> Result<Params> {
    let mut c = Cursor::new(bytes);
    c.expect_magic(PARAM_MAGIC)?;
    let n = c.u32()?;
    let mut p = Params::new();
    for _ in 0..n {
        c.section("header");
        let name = c.name()?;
        let rank = c.take(1)?[0] as usize;
        if rank > 5 {
            return Err(c.err(format!("rank {rank} exceeds 5")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| c.err("dimension overflow"))?;
        c.section("payload");
        let values = c.f32_vec(count)?;
        p.insert(name, Tensor::new(shape, values)?);
    }
    if c.remaining() != 0 {
        return Err(c.err(format!("{} trailing bytes", c.remaining())));
    }
    Ok(p)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Params> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_params_from(&fs::read(path)?)
}
