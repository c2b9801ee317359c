//! Causal 3D convolution with stage-windowed streaming.
//!
//! The input sequence `X_0..X_k` is prefixed with three zero frames. Stage
//! `s = 1..=1+k/2` sees padded frames `2s-2..=2s+1`: two fresh frames plus two
//! cached ones. Layer 0 (temporal kernel 3) turns those four frames into two,
//! layer 1 (kernel 4, the only temporal stride 2) into one, and every later
//! layer (kernel 2) combines its cached previous-stage input with the new one.
//! Caches start at zero, which makes the streamed result identical to a
//! one-shot convolution over the whole padded sequence.

use rand::Rng;

use crate::autodiff::{Binding, ConvSpec, Graph, Params, Scalar, Tensor, Var};
use crate::error::{domain, Error, Result};

/// Zero frames prepended before the first input frame.
pub const LEAD_PAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub stride_t: usize,
    /// Frames of this layer's input kept for the next stage.
    pub cache: usize,
    pub stride_hw: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalStack {
    prefix: String,
    layers: Vec<CausalLayer>,
    bias: bool,
}

impl CausalStack {
    /// `widths[l]` is the output width of layer `l`; the first two layers
    /// halve the spatial resolution each.
    pub fn new(prefix: &str, c_in: usize, widths: &[usize], bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(crate::error::config(
                "causal stack needs at least two layers",
            ));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (l, &w) in widths.iter().enumerate() {
            let (kt, stride_t, cache, stride_hw) = match l {
                0 => (3, 1, 2, 2),
                1 => (4, 2, 2, 2),
                _ => (2, 1, 1, 1),
            };
            layers.push(CausalLayer {
                c_in: c,
                c_out: w,
                kt,
                stride_t,
                cache,
                stride_hw,
            });
            c = w;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            layers,
            bias,
        })
    }

    pub fn layers(&self) -> &[CausalLayer] {
        &self.layers
    }

    /// Index of the layer carrying the temporal stride.
    pub fn strided_layer(&self) -> usize {
        1
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").c_out
    }

    pub fn spatial_factor(&self) -> usize {
        self.layers.iter().map(|l| l.stride_hw).product()
    }

    fn kernel_name(&self, l: usize) -> String {
        format!("{}.{l}.w", self.prefix)
    }

    fn bias_name(&self, l: usize) -> String {
        format!("{}.{l}.b", self.prefix)
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut impl Rng) {
        for (l, layer) in self.layers.iter().enumerate() {
            let fan_in = layer.c_in * layer.kt * 9;
            p.normal(
                &self.kernel_name(l),
                &[layer.c_out, layer.c_in, layer.kt, 3, 3],
                (1.0 / fan_in as f64).sqrt(),
                rng,
            );
            if self.bias {
                p.zeros(&self.bias_name(l), &[layer.c_out]);
            }
        }
    }

    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        l: usize,
        x: Var,
        pad_t: usize,
    ) -> Result<Var> {
        let layer = &self.layers[l];
        let spec = ConvSpec::spatial(layer.stride_hw, 1).with_time(layer.stride_t, (pad_t, 0));
        let mut y = g.conv3d(x, b.var(&self.kernel_name(l))?, spec)?;
        if self.bias {
            y = g.channel_bias(y, b.var(&self.bias_name(l))?)?;
        }
        if l + 1 < self.layers.len() {
            y = g.silu(y)?;
        }
        Ok(y)
    }

    /// One-shot encoding of a padded `[N, C, k+4, H, W]` sequence into
    /// `[N, C', 1+k/2, H', W']`. Each layer's input is zero-padded in time by
    /// its cache length, which is what a fresh cache contributes.
    pub fn forward_full<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        padded: Var,
    ) -> Result<Var> {
        let t = g.shape(padded).get(2).copied().unwrap_or(0);
        if t < LEAD_PAD + 3 || (t - LEAD_PAD - 1) % 2 != 0 {
            return Err(domain(format!(
                "padded sequence of {t} frames does not hold an even k >= 2"
            )));
        }
        let mut h = padded;
        for l in 0..self.layers.len() {
            let pad = if l == 0 { 0 } else { self.layers[l].cache };
            h = self.apply(g, b, l, h, pad)?;
        }
        Ok(h)
    }

    /// One streaming stage on `fresh` (`[N, C, 2, H, W]`), threading `caches`
    /// (one graph variable per layer, `None` meaning zeros).
    pub fn forward_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        fresh: Var,
        caches: &mut [Option<Var>],
    ) -> Result<Var> {
        let mut h = fresh;
        for (l, layer) in self.layers.iter().enumerate() {
            let cached = match caches[l] {
                Some(c) => c,
                None => {
                    let mut s = g.shape(h).to_vec();
                    s[2] = layer.cache;
                    g.constant(Tensor::zeros(&s))?
                }
            };
            let window = g.concat_time(&[cached, h])?;
            let len = g.shape(window)[2];
            caches[l] = Some(g.slice_time(window, len - layer.cache, layer.cache)?);
            h = self.apply(g, b, l, window, 0)?;
        }
        Ok(h)
    }
}

/// `(0, 0, 0, X_0, ..., X_k)` along axis 2, with `X_k` zeroed when `mask_last`.
pub fn pad_and_mask<T: Scalar>(x: &Tensor<T>, mask_last: bool) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(crate::error::shape(format!(
            "expected [N, C, T, H, W], got {s:?}"
        )));
    }
    let (nc, t, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
    if t < 3 || (t - 1) % 2 != 0 {
        return Err(domain(format!("need k+1 frames with even k >= 2, got {t}")));
    }
    let tp = t + LEAD_PAD;
    let mut out = vec![T::zero(); nc * tp * plane];
    for c in 0..nc {
        let keep = if mask_last { t - 1 } else { t };
        let src = &x.data()[c * t * plane..(c * t + keep) * plane];
        out[(c * tp + LEAD_PAD) * plane..][..keep * plane].copy_from_slice(src);
    }
    Tensor::new(vec![s[0], s[1], tp, s[3], s[4]], out)
}

/// Per-layer cached activations of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState<T: Scalar = f32> {
    caches: Vec<Option<Tensor<T>>>,
    stage: usize,
}

impl<T: Scalar> CacheState<T> {
    pub fn new(stack: &CausalStack) -> Self {
        Self {
            caches: vec![None; stack.layers.len()],
            stage: 0,
        }
    }

    /// Completed stages.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn layer(&self, l: usize) -> Option<&Tensor<T>> {
        self.caches.get(l).and_then(Option::as_ref)
    }
}

/// Encodes the next pair of padded frames, `[N, C, 2, H, W]`, into one latent frame.
pub fn encode_streaming<T: Scalar>(
    stack: &CausalStack,
    params: &Params<T>,
    fresh: &Tensor<T>,
    state: &mut CacheState<T>,
) -> Result<Tensor<T>> {
    let s = fresh.shape();
    let c_in = stack.layers[0].c_in;
    if s.len() != 5 || s[2] != 2 || s[1] != c_in {
        return Err(Error::State(format!(
            "stage input must be [N, {c_in}, 2, H, W], got {s:?}"
        )));
    }
    if let Some(c) = &state.caches[0] {
        let cs = c.shape();
        if (cs[0], cs[3], cs[4]) != (s[0], s[3], s[4]) {
            return Err(Error::State(format!(
                "stage input {s:?} does not match cached {cs:?}"
            )));
        }
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g)?;
    let mut vars = Vec::with_capacity(state.caches.len());
    for c in &state.caches {
        vars.push(c.as_ref().map(|t| g.constant(t.clone())).transpose()?);
    }
    let x = g.constant(fresh.clone())?;
    let y = stack.forward_stage(&mut g, &b, x, &mut vars)?;
    let mut next = Vec::with_capacity(vars.len());
    for (l, v) in vars.into_iter().enumerate() {
        let t = g.value(v.expect("set by forward_stage")).clone();
        if let Some(prev) = &state.caches[l] {
            if prev.shape() != t.shape() {
                return Err(Error::State(format!(
                    "layer {l} cache changed shape from {:?} to {:?}",
                    prev.shape(),
                    t.shape()
                )));
            }
        }
        next.push(Some(t));
    }
    state.caches = next;
    state.stage += 1;
    Ok(g.value(y).clone())
}

/// Latent sequence of `x` (`[N, C, k+1, H, W]`) computed stage by stage.
pub fn encode_full<T: Scalar>(
    stack: &CausalStack,
    params: &Params<T>,
    x: &Tensor<T>,
    mask_last: bool,
) -> Result<Tensor<T>> {
    let padded = pad_and_mask(x, mask_last)?;
    let s = padded.shape().to_vec();
    let stages = (s[2] - LEAD_PAD + 1) / 2;
    let mut state = CacheState::new(stack);
    let mut outs = Vec::with_capacity(stages);
    for st in 1..=stages {
        let pair = time_slice(&padded, 2 * st, 2)?;
        outs.push(encode_streaming(stack, params, &pair, &mut state)?);
    }
    concat_frames(&outs)
}

/// Same result through a single convolution per layer over the whole sequence.
pub fn encode_monolithic<T: Scalar>(
    stack: &CausalStack,
    params: &Params<T>,
    x: &Tensor<T>,
    mask_last: bool,
) -> Result<Tensor<T>> {
    let padded = pad_and_mask(x, mask_last)?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g)?;
    let p = g.constant(padded)?;
    let y = stack.forward_full(&mut g, &b, p)?;
    Ok(g.value(y).clone())
}

pub(crate) fn time_slice<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (nc, t, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
    if start + len > t {
        return Err(crate::error::shape(format!(
            "frames {start}..{} of {t}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(nc * len * plane);
    for c in 0..nc {
        out.extend_from_slice(&x.data()[(c * t + start) * plane..(c * t + start + len) * plane]);
    }
    Tensor::new(vec![s[0], s[1], len, s[3], s[4]], out)
}

pub(crate) fn concat_frames<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| crate::error::shape("nothing to concatenate"))?;
    let s = first.shape();
    let (nc, plane) = (s[0] * s[1], s[3] * s[4]);
    let total: usize = parts.iter().map(|p| p.shape()[2]).sum();
    let mut out = Vec::with_capacity(nc * total * plane);
    for c in 0..nc {
        for p in parts {
            let len = p.shape()[2];
            out.extend_from_slice(&p.data()[c * len * plane..(c + 1) * len * plane]);
        }
    }
    Tensor::new(vec![s[0], s[1], total, s[3], s[4]], out)
}
