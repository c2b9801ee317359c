use ndarray::Array2;

use super::conv::{self, ConvSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape, Error, Result};
use crate::spectral;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Conv {
        x: Var,
        k: Var,
        spec: ConvSpec,
        xd: [usize; 5],
        kd: [usize; 5],
    },
    ChannelBias(Var, Var),
    Linear(Var, Var, Option<Var>),
    RmsNorm {
        x: Var,
        scale: Var,
        eps: f64,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    WeightedMse {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        total: f64,
    },
    KlNormal(Var, Var),
    Reshape(Var),
    SliceTime {
        x: Var,
        start: usize,
    },
    ConcatTime(Vec<Var>),
    TimeUnfold {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Lowpass {
        x: Var,
        r_cut: f64,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations recorded in execution order; reverse order is a valid
/// topological order for the backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dims5(s: &[usize]) -> Result<[usize; 5]> {
    s.try_into()
        .map_err(|_| shape(format!("expected a rank-5 tensor, got {s:?}")))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies `f` to every trailing `H x W` plane of `x`.
fn map_planes<T: Scalar>(x: &Tensor<T>, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks(h * w) {
        let a = Array2::from_shape_fn((h, w), |(i, j)| plane[i * w + j].f64());
        out.extend(f(&a).iter().map(|&v| T::of(v)));
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn lowpass_planes<T: Scalar>(x: &Tensor<T>, r_cut: f64) -> Tensor<T> {
    map_planes(x, |a| {
        spectral::lowpass(a.view(), r_cut).expect("finite plane")
    })
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                std::mem::discriminant(&op)
            )));
        }
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite leaf tensor".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c_t = T::of(c);
        let t = self.value(a).map(|x| x * c_t);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| T::of(x.f64() * sigmoid(x.f64())));
        self.push(t, Op::Silu(a), &[a])
    }

    fn conv(
        &mut self,
        x: Var,
        k: Var,
        spec: ConvSpec,
        xd: [usize; 5],
        kd: [usize; 5],
        out_rank4: bool,
    ) -> Result<Var> {
        let (data, od) = conv::forward(self.value(x).data(), xd, self.value(k).data(), kd, &spec)?;
        let shape = if out_rank4 {
            vec![od[0], od[1], od[3], od[4]]
        } else {
            od.to_vec()
        };
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Conv { x, k, spec, xd, kd }, &[x, k])
    }

    /// `x: [N, C, H, W]`, `k: [O, C, kh, kw]`; the temporal fields of `spec` are ignored.
    pub fn conv2d(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        let xd = [xs[0], xs[1], 1, xs[2], xs[3]];
        let kd = [ks[0], ks[1], 1, ks[2], ks[3]];
        let spec = ConvSpec {
            stride_t: 1,
            pad_t: (0, 0),
            ..spec
        };
        self.conv(x, k, spec, xd, kd, true)
    }

    /// `x: [N, C, T, H, W]`, `k: [O, C, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let xd = dims5(self.shape(x))?;
        let kd = dims5(self.shape(k))?;
        self.conv(x, k, spec, xd, kd, false)
    }

    /// Adds `b[c]` along axis 1.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(shape(format!("bias {:?} for input {xs:?}", self.shape(b))));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        self.push(t, Op::ChannelBias(x, b), &[x, b])
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape(format!(
                    "linear bias {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            for q in 0..o {
                let mut acc = T::zero();
                for p in 0..i {
                    acc += xv[r * i + p] * wv[q * i + p];
                }
                out[r * o + q] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..n {
                for q in 0..o {
                    out[r * o + q] += bv[q];
                }
            }
        }
        let t = Tensor::new(vec![n, o], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear(x, w, b), &inputs)
    }

    /// Root-mean-square normalization over axis 1 followed by a per-channel gain.
    pub fn rmsnorm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(scale) != [xs[1]] {
            return Err(shape(format!(
                "rmsnorm scale {:?} for input {xs:?}",
                self.shape(scale)
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for p in 0..inner {
                let ms = (0..c)
                    .map(|ch| xv[(b * c + ch) * inner + p].f64().powi(2))
                    .sum::<f64>()
                    / c as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                for ch in 0..c {
                    let i = (b * c + ch) * inner + p;
                    out[i] = T::of(xv[i].f64() * inv * sv[ch].f64());
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push(t, Op::RmsNorm { x, scale, eps }, &[x, scale])
    }

    /// `scale * x + shift` with `scale, shift: [N, C]` broadcast over trailing axes.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2
            || self.shape(scale) != [xs[0], xs[1]]
            || self.shape(shift) != [xs[0], xs[1]]
        {
            return Err(shape(format!(
                "film: input {xs:?}, scale {:?}, shift {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let nc = i / inner;
            *v = sc[nc] * *v + sh[nc];
        }
        self.push(t, Op::Film { x, scale, shift }, &[x, scale, shift])
    }

    /// `sum(w * (pred - target)^2) / sum(w)` with `weights` broadcast from the right.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &Tensor<T>) -> Result<Var> {
        self.same_shape(pred, target, "weighted_mse")?;
        let ps = self.shape(pred).to_vec();
        let expanded = broadcast_to(weights, &ps)?;
        let total: f64 = expanded.iter().sum();
        if !(total > 0.0) {
            return Err(shape("weighted_mse: weights sum to zero"));
        }
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let loss: f64 = pv
            .iter()
            .zip(tv)
            .zip(&expanded)
            .map(|((&p, &t), &w)| w * (p.f64() - t.f64()).powi(2))
            .sum::<f64>()
            / total;
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::WeightedMse {
                pred,
                target,
                weights: expanded,
                total,
            },
            &[pred, target],
        )
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`, summed over all
    /// axes but the first and averaged over the first.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape(mu, logvar, "kl_normal")?;
        let n = self.shape(mu).first().copied().unwrap_or(1).max(1);
        let m = self.value(mu).data();
        let lv = self.value(logvar).data();
        let kl: f64 = m
            .iter()
            .zip(lv)
            .map(|(&m, &l)| {
                let (m, l) = (m.f64(), l.f64());
                -0.5 * (1.0 + l - m * m - l.exp())
            })
            .sum::<f64>()
            / n as f64;
        self.push(
            Tensor::scalar(T::of(kl)),
            Op::KlNormal(mu, logvar),
            &[mu, logvar],
        )
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(new_shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Frames `[start, start + len)` of a `[N, C, T, H, W]` tensor.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, t, h, w] = dims5(self.shape(x))?;
        if len == 0 || start + len > t {
            return Err(shape(format!("time slice {start}+{len} of {t} frames")));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * len * plane);
        for nc in 0..n * c {
            let base = (nc * t + start) * plane;
            out.extend_from_slice(&xv[base..base + len * plane]);
        }
        let t = Tensor::new(vec![n, c, len, h, w], out)?;
        self.push(t, Op::SliceTime { x, start }, &[x])
    }

    /// Concatenates rank-5 tensors along the time axis.
    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape("concat of nothing"))?;
        let [n, c, _, h, w] = dims5(self.shape(first))?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, pt, ph, pw] = dims5(self.shape(p))?;
            if (pn, pc, ph, pw) != (n, c, h, w) {
                return Err(shape(format!(
                    "concat_time: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            lens.push(pt);
        }
        let total: usize = lens.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c * total * plane);
        for nc in 0..n * c {
            for (&p, &len) in parts.iter().zip(&lens) {
                let v = self.value(p).data();
                out.extend_from_slice(&v[nc * len * plane..(nc + 1) * len * plane]);
            }
        }
        let t = Tensor::new(vec![n, c, total, h, w], out)?;
        self.push(t, Op::ConcatTime(parts.to_vec()), parts)
    }

    /// `[N, f*C, T, H, W] -> [N, C, f*T, H, W]`: channel group `r` becomes
    /// frame offset `r` within each block of `f` output frames.
    pub fn time_unfold(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, fc, t, h, w] = dims5(self.shape(x))?;
        if factor == 0 || fc % factor != 0 {
            return Err(shape(format!("{fc} channels not divisible by {factor}")));
        }
        let c = fc / factor;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for r in 0..factor {
                for ch in 0..c {
                    for tt in 0..t {
                        let src = ((b * fc + r * c + ch) * t + tt) * plane;
                        let dst = ((b * c + ch) * (t * factor) + tt * factor + r) * plane;
                        out[dst..dst + plane].copy_from_slice(&xv[src..src + plane]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, t * factor, h, w], out)?;
        self.push(t, Op::TimeUnfold { x, factor }, &[x])
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return Err(shape("upsample needs rank >= 2 and a positive factor"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() * factor * factor);
        for plane in xv.chunks(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(plane[(i / factor) * w + j / factor]);
                }
            }
        }
        let mut os = s.clone();
        let r = os.len();
        os[r - 2] = oh;
        os[r - 1] = ow;
        let t = Tensor::new(os, out)?;
        self.push(t, Op::Upsample { x, factor }, &[x])
    }

    /// Block means over the last two axes.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return Err(shape("avg_pool needs rank >= 2 and a positive factor"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % factor != 0 || w % factor != 0 {
            return Err(shape(format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / (factor * factor));
        for plane in xv.chunks(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..factor {
                        for b in 0..factor {
                            acc += plane[(i * factor + a) * w + j * factor + b].f64();
                        }
                    }
                    out.push(T::of(acc * inv));
                }
            }
        }
        let mut os = s.clone();
        let r = os.len();
        os[r - 2] = oh;
        os[r - 1] = ow;
        let t = Tensor::new(os, out)?;
        self.push(t, Op::AvgPool { x, factor }, &[x])
    }

    /// Circular low-pass of every trailing `H x W` plane, keeping radius `< r_cut`.
    pub fn lowpass(&mut self, x: Var, r_cut: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(Error::Domain(format!(
                "lowpass needs spatial dims >= 2, got {s:?}"
            )));
        }
        let t = lowpass_planes(self.value(x), r_cut);
        self.push(t, Op::Lowpass { x, r_cut }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(T::of(self.value(x).sum_f64()));
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(T::of(v.sum_f64() / v.len() as f64));
        self.push(t, Op::Mean(x), &[x])
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                for (input, contrib) in self.local_grads(node, &g)? {
                    if !self.needs(input) {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<T>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("shape preserved")
        };
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (
                        *a,
                        like(*a, gd.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                    ),
                    (
                        *b,
                        like(*b, gd.iter().zip(av).map(|(&g, &a)| g * a).collect()),
                    ),
                ]
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                vec![(*a, g.map(|x| x * c))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => {
                let y = node.value.data();
                vec![(
                    *a,
                    like(*a, gd.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                )]
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x.f64());
                        T::of(g.f64() * s * (1.0 + x.f64() * (1.0 - s)))
                    })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Conv { x, k, spec, xd, kd } => {
                let (dx, dk) = conv::backward(
                    val(*x).data(),
                    *xd,
                    val(*k).data(),
                    *kd,
                    spec,
                    gd,
                    self.needs(*x),
                    self.needs(*k),
                );
                let mut out = Vec::new();
                if self.needs(*x) {
                    out.push((*x, like(*x, dx)));
                }
                if self.needs(*k) {
                    out.push((*k, like(*k, dk)));
                }
                out
            }
            Op::ChannelBias(x, b) => {
                let s = val(*x).shape();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let mut db = vec![0.0f64; c];
                for (i, &gv) in gd.iter().enumerate() {
                    db[(i / inner) % c] += gv.f64();
                }
                vec![
                    (*x, g.clone()),
                    (*b, like(*b, db.into_iter().map(T::of).collect())),
                ]
            }
            Op::Linear(x, w, b) => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut dx = vec![T::zero(); n * i];
                let mut dw = vec![T::zero(); o * i];
                for r in 0..n {
                    for q in 0..o {
                        let gq = gd[r * o + q];
                        for p in 0..i {
                            dx[r * i + p] += gq * wv[q * i + p];
                            dw[q * i + p] += gq * xv[r * i + p];
                        }
                    }
                }
                let mut out = vec![(*x, like(*x, dx)), (*w, like(*w, dw))];
                if let Some(b) = b {
                    let db = (0..o)
                        .map(|q| (0..n).map(|r| gd[r * o + q]).sum())
                        .collect();
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::RmsNorm { x, scale, eps } => {
                let s = val(*x).shape();
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let (xv, sv) = (val(*x).data(), val(*scale).data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![0.0f64; c];
                for b in 0..n {
                    for p in 0..inner {
                        let at = |ch: usize| (b * c + ch) * inner + p;
                        let ms = (0..c).map(|ch| xv[at(ch)].f64().powi(2)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (ms + eps).sqrt();
                        // Projection of the scaled upstream gradient onto x.
                        let dot: f64 = (0..c)
                            .map(|ch| sv[ch].f64() * gd[at(ch)].f64() * xv[at(ch)].f64())
                            .sum();
                        for ch in 0..c {
                            let i = at(ch);
                            let gs = sv[ch].f64() * gd[i].f64();
                            dx[i] = T::of(gs * inv - xv[i].f64() * inv.powi(3) * dot / c as f64);
                            ds[ch] += gd[i].f64() * xv[i].f64() * inv;
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*scale, like(*scale, ds.into_iter().map(T::of).collect())),
                ]
            }
            Op::Film { x, scale, shift } => {
                let s = val(*x).shape();
                let inner: usize = s[2..].iter().product();
                let (xv, sc) = (val(*x).data(), val(*scale).data());
                let nc = s[0] * s[1];
                let mut dscale = vec![0.0f64; nc];
                let mut dshift = vec![0.0f64; nc];
                let mut dx = vec![T::zero(); xv.len()];
                for (i, &gv) in gd.iter().enumerate() {
                    let k = i / inner;
                    dx[i] = gv * sc[k];
                    dscale[k] += gv.f64() * xv[i].f64();
                    dshift[k] += gv.f64();
                }
                vec![
                    (*x, like(*x, dx)),
                    (
                        *scale,
                        like(*scale, dscale.into_iter().map(T::of).collect()),
                    ),
                    (
                        *shift,
                        like(*shift, dshift.into_iter().map(T::of).collect()),
                    ),
                ]
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
                total,
            } => {
                let g0 = gd[0].f64();
                let (pv, tv) = (val(*pred).data(), val(*target).data());
                let dp: Vec<T> = pv
                    .iter()
                    .zip(tv)
                    .zip(weights)
                    .map(|((&p, &t), &w)| T::of(g0 * 2.0 * w * (p.f64() - t.f64()) / total))
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                vec![(*pred, like(*pred, dp)), (*target, like(*target, dt))]
            }
            Op::KlNormal(mu, logvar) => {
                let n = val(*mu).shape().first().copied().unwrap_or(1).max(1) as f64;
                let g0 = gd[0].f64() / n;
                let dmu = val(*mu)
                    .data()
                    .iter()
                    .map(|&m| T::of(g0 * m.f64()))
                    .collect();
                let dlv = val(*logvar)
                    .data()
                    .iter()
                    .map(|&l| T::of(-0.5 * g0 * (1.0 - l.f64().exp())))
                    .collect();
                vec![(*mu, like(*mu, dmu)), (*logvar, like(*logvar, dlv))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::SliceTime { x, start } => {
                let [n, c, t, h, w] = dims5(val(*x).shape())?;
                let len = node.value.shape()[2];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * t * plane];
                for nc in 0..n * c {
                    let dst = (nc * t + start) * plane;
                    dx[dst..dst + len * plane]
                        .copy_from_slice(&gd[nc * len * plane..(nc + 1) * len * plane]);
                }
                vec![(*x, like(*x, dx))]
            }
            Op::ConcatTime(parts) => {
                let s = node.value.shape();
                let (nc, plane) = (s[0] * s[1], s[3] * s[4]);
                let total = s[2];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[2];
                    let mut d = Vec::with_capacity(nc * len * plane);
                    for k in 0..nc {
                        let src = (k * total + offset) * plane;
                        d.extend_from_slice(&gd[src..src + len * plane]);
                    }
                    offset += len;
                    out.push((p, like(p, d)));
                }
                out
            }
            Op::TimeUnfold { x, factor } => {
                let [n, fc, t, h, w] = dims5(val(*x).shape())?;
                let c = fc / factor;
                let plane = h * w;
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for r in 0..*factor {
                        for ch in 0..c {
                            for tt in 0..t {
                                let src = ((b * fc + r * c + ch) * t + tt) * plane;
                                let dst = ((b * c + ch) * (t * factor) + tt * factor + r) * plane;
                                dx[src..src + plane].copy_from_slice(&gd[dst..dst + plane]);
                            }
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Upsample { x, factor } => {
                let s = val(*x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0f64; val(*x).len()];
                for (pi, plane) in gd.chunks(oh * ow).enumerate() {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[pi * h * w + (i / factor) * w + j / factor] +=
                                plane[i * ow + j].f64();
                        }
                    }
                }
                vec![(*x, like(*x, dx.into_iter().map(T::of).collect()))]
            }
            Op::AvgPool { x, factor } => {
                let s = val(*x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / factor, w / factor);
                let inv = T::of(1.0 / (factor * factor) as f64);
                let mut dx = vec![T::zero(); val(*x).len()];
                for (pi, plane) in dx.chunks_mut(h * w).enumerate() {
                    for i in 0..h {
                        for j in 0..w {
                            plane[i * w + j] =
                                gd[pi * oh * ow + (i / factor) * ow + j / factor] * inv;
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Lowpass { x, r_cut } => vec![(*x, lowpass_planes(g, *r_cut))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), T::of(gd[0].f64() / n)))]
            }
        })
    }
}

/// Expands `w` to `shape` under right-aligned broadcasting.
fn broadcast_to<T: Scalar>(w: &Tensor<T>, shape: &[usize]) -> Result<Vec<f64>> {
    let ws = w.shape();
    if ws.len() > shape.len() {
        return Err(self::shape(format!("cannot broadcast {ws:?} to {shape:?}")));
    }
    let lead = shape.len() - ws.len();
    for (i, &d) in ws.iter().enumerate() {
        if d != 1 && d != shape[lead + i] {
            return Err(self::shape(format!("cannot broadcast {ws:?} to {shape:?}")));
        }
    }
    let n: usize = shape.iter().product();
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..ws.len()).rev() {
        strides[lead + i] = if ws[i] == 1 { 0 } else { acc };
        acc *= ws[i];
    }
    let wd = w.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(wd[off].f64());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}
