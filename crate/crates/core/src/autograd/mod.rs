//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! walks the record in reverse. Nodes that do not depend on any
//! gradient-requiring leaf are never differentiated, so frozen parameters and
//! constant inputs cost nothing in the backward pass.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::{leaky_relu, sigmoid, softplus, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_channels: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    LeakyRelu(Var, T),
    Modulate { x: Var, scale: Var, shift: Var },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    AddNoise { x: Var, noise: Tensor<T>, strength: Var },
    GlobalAvgPool(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { sources: Vec<Var>, picks: Vec<(usize, usize)> },
    Reshape(Var),
    InterpWeights { s: Var, coef: Vec<T> },
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    GatherElems { x: Var, idx: Vec<isize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

fn shape_err<X>(msg: String) -> Result<X> {
    Err(Error::Shape(msg))
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

    /// Drops every node created after the first `len`; earlier `Var`s stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x·mul + add` with scalar constants.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let v = self.value(x).map(|e| e * mul + add);
        self.push(v, Op::Affine(x, mul), &[x])
    }

    pub fn scale(&mut self, x: Var, mul: T) -> Var {
        self.affine(x, mul, T::zero())
    }

    /// `y = x·Wᵀ + b` with `x: [N, in…]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 {
            return shape_err(format!("linear weight must be 2-D, got {:?}", tw.shape()));
        }
        let (n, din) = (tx.rows(), tx.row_len());
        let (dout, win) = (tw.shape()[0], tw.shape()[1]);
        if din != win {
            return shape_err(format!("linear: input width {din} vs weight {:?}", tw.shape()));
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, tx.data(), (din, 1), tw.data(), (1, din), T::zero(), &mut out, (dout, 1));
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != dout {
                return shape_err(format!("linear bias {:?} for width {dout}", tb.shape()));
            }
            for r in 0..n {
                for (o, &bv) in out[r * dout..(r + 1) * dout].iter_mut().zip(tb.data()) {
                    *o = *o + bv;
                }
            }
        }
        let v = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return shape_err(format!("conv2d: input {xs:?} weight {ws:?}"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] || stride == 0 {
            return shape_err(format!("conv2d: kernel {ws:?} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kh: ws[2], kw: ws[3], stride, pad };
        let out_channels = ws[0];
        let (ho, wo) = geom.out_hw();
        let batch = xs[0];
        let mut out = vec![T::zero(); batch * out_channels * ho * wo];
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.numel() != out_channels {
                    return shape_err(format!("conv2d bias {:?} for {out_channels} channels", tb.shape()));
                }
                Some(tb.data())
            }
            None => None,
        };
        kernels::conv2d_forward(tx.data(), batch, &geom, tw.data(), out_channels, bias, &mut out);
        let v = Tensor::new(&[batch, out_channels, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, out_channels }, &inputs))
    }

    fn nchw(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => shape_err(format!("{what} expects NCHW, got {s:?}")),
        }
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "upsample2x")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * h * w * 4];
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2x needs even spatial size, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let s = &src[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[p * oh * ow + y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * q;
                }
            }
        }
        let v = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2x(x), &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|e| kernels::leaky_relu(e, slope));
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    /// Channelwise `x·scale + shift` with `scale, shift: [B, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "modulate")?;
        for s in [scale, shift] {
            if self.shape(s) != [b, c] {
                return shape_err(format!("modulate: params {:?} for input {:?}", self.shape(s), [b, c, h, w]));
            }
        }
        let plane = h * w;
        let (tx, ts, tb) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); tx.len()];
        for p in 0..b * c {
            let (g, be) = (ts[p], tb[p]);
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(&tx[p * plane..(p + 1) * plane]) {
                *o = v * g + be;
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::Modulate { x, scale, shift }, &[x, scale, shift]))
    }

    /// Per-sample, per-channel normalisation `(x − μ) / √(σ² + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "instance_norm")?;
        let plane = h * w;
        let n = T::lit(plane as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let s = &src[p * plane..(p + 1) * plane];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(s) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// `x + strength·noise`, noise `[B, 1, H, W]` broadcast over channels, strength `[1]`.
    pub fn add_noise(&mut self, x: Var, noise: Tensor<T>, strength: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "add_noise")?;
        if noise.shape() != [b, 1, h, w] || self.value(strength).numel() != 1 {
            return shape_err(format!("add_noise: noise {:?} for input {:?}", noise.shape(), [b, c, h, w]));
        }
        let s = self.value(strength).item();
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = src.to_vec();
        for bi in 0..b {
            let nz = &noise.data()[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let o = &mut out[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for (v, &z) in o.iter_mut().zip(nz) {
                    *v = *v + s * z;
                }
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::AddNoise { x, noise, strength }, &[x, strength]))
    }

    /// Mean over the spatial axes: `[B, C, H, W] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "global_avg_pool")?;
        let plane = h * w;
        let n = T::lit(plane as f64);
        let src = self.value(x).data();
        let out = (0..b * c).map(|p| src[p * plane..(p + 1) * plane].iter().copied().sum::<T>() / n).collect();
        let v = Tensor::new(&[b, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} for rank {}", first.len()));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Builds `[picks.len(), …]` from rows of several sources; `picks[i] = (source, row)`.
    /// Sources must share the same trailing shape.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let tail = self.shape(*sources.first().ok_or_else(|| Error::Shape("gather of nothing".into()))?)[1..].to_vec();
        for &s in sources {
            if self.shape(s)[1..] != tail[..] {
                return shape_err(format!("gather_rows: {:?} vs tail {tail:?}", self.shape(s)));
            }
        }
        let width: usize = tail.iter().product();
        let mut out = Vec::with_capacity(picks.len() * width);
        for &(si, r) in picks {
            let src = self.value(*sources.get(si).ok_or_else(|| Error::Shape(format!("source {si} missing")))?);
            if r >= src.rows() {
                return shape_err(format!("gather_rows: row {r} of {:?}", src.shape()));
            }
            out.extend_from_slice(src.row(r));
        }
        let mut shape = vec![picks.len()];
        shape.extend(tail);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::GatherRows { sources: sources.to_vec(), picks: picks.to_vec() }, sources))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Interpolation weights `a[b, d] = f_b + sigmoid(s_d)·sin(2π f_b)/(2π)` for
    /// per-row fractional positions `f_b ∈ [0, 1)`.
    pub fn interp_weights(&mut self, s: Var, frac: &[T]) -> Var {
        let beta: Vec<T> = self.value(s).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let two_pi = T::PI() + T::PI();
        let coef: Vec<T> = frac.iter().map(|&f| (two_pi * f).sin() / two_pi).collect();
        let d = beta.len();
        let mut out = Vec::with_capacity(frac.len() * d);
        for (&f, &c) in frac.iter().zip(&coef) {
            out.extend(beta.iter().map(|&b| f + b * c));
        }
        let v = Tensor::new(&[frac.len(), d], out).expect("shape");
        self.push(v, Op::InterpWeights { s, coef }, &[s])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().map(|&e| e * e).sum());
        self.push(v, Op::SumSq(x), &[x])
    }

    /// `y[i] = x[idx[i]]`, or zero where `idx[i] < 0`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<isize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if idx.len() != shape.iter().product::<usize>() {
            return shape_err(format!("gather_elems: {} indices for {shape:?}", idx.len()));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= src.len() as isize {
                return shape_err(format!("gather_elems: index {i} of {}", src.len()));
            }
            out.push(if i < 0 { T::zero() } else { src[i as usize] });
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::GatherElems { x, idx }, &[x]))
    }

    /// Back-propagates from a single-element root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return shape_err(format!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        self.backward_with(root, Tensor::new(self.shape(root), vec![T::one()])?)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(root) {
            return shape_err(format!("seed {:?} for root {:?}", seed.shape(), self.shape(root)));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { slots });
        }
        slots[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = slots[i].take() else { continue };
            self.propagate(i, &dy, &mut slots);
        }
        Ok(Grads { slots })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut slots[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, T::one()),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates `f(grad_slice)` into `v` without building a temporary when the slot exists.
    fn accumulate_with(&self, slots: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let slot = &mut slots[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(slots, v, dy.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(slots, *a, dy.clone());
                }
                if self.wants(*b) {
                    self.accumulate(slots, *b, dy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate_with(slots, *a, |acc| {
                        for ((s, &g), &o) in acc.iter_mut().zip(dy.data()).zip(tb.data()) {
                            *s = *s + g * o;
                        }
                    });
                }
                if self.wants(*b) {
                    self.accumulate_with(slots, *b, |acc| {
                        for ((s, &g), &o) in acc.iter_mut().zip(dy.data()).zip(ta.data()) {
                            *s = *s + g * o;
                        }
                    });
                }
            }
            Op::Affine(x, m) => {
                if self.wants(*x) {
                    let m = *m;
                    self.accumulate(slots, *x, dy.map(|g| g * m));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = (tx.rows(), tx.row_len());
                let dout = tw.shape()[0];
                let g = dy.data();
                if self.wants(*x) {
                    self.accumulate_with(slots, *x, |acc| {
                        T::gemm(n, dout, din, g, (dout, 1), tw.data(), (din, 1), T::one(), acc, (din, 1));
                    });
                }
                if self.wants(*w) {
                    self.accumulate_with(slots, *w, |acc| {
                        T::gemm(dout, n, din, g, (1, dout), tx.data(), (din, 1), T::one(), acc, (din, 1));
                    });
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accumulate_with(slots, b, |acc| {
                        for r in 0..n {
                            for (s, &gv) in acc.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *s = *s + gv;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, out_channels } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let mut dx = self.wants(*x).then(|| Tensor::zeros(tx.shape()));
                let mut dw = self.wants(*w).then(|| Tensor::zeros(tw.shape()));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| Tensor::zeros(self.shape(b)));
                kernels::conv2d_backward(
                    tx.data(),
                    batch,
                    geom,
                    tw.data(),
                    *out_channels,
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accumulate(slots, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(slots, *w, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(slots, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let bc = s[0] * s[1];
                    let g = dy.data();
                    self.accumulate_with(slots, *x, |acc| {
                        for p in 0..bc {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    let d = &mut acc[p * h * w + (y / 2) * w + xx / 2];
                                    *d = *d + g[p * 4 * h * w + y * 2 * w + xx];
                                }
                            }
                        }
                    });
                }
            }
            Op::AvgPool2x(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let bc = s[0] * s[1];
                    let q = T::lit(0.25);
                    let g = dy.data();
                    self.accumulate_with(slots, *x, |acc| {
                        for p in 0..bc {
                            for y in 0..h {
                                for xx in 0..w {
                                    let d = &mut acc[p * h * w + y * w + xx];
                                    *d = *d + g[p * oh * ow + (y / 2) * ow + xx / 2] * q;
                                }
                            }
                        }
                    });
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let slope = *slope;
                    self.accumulate_with(slots, *x, |acc| {
                        for ((s, &g), &v) in acc.iter_mut().zip(dy.data()).zip(tx.data()) {
                            *s = *s + if v > T::zero() { g } else { g * slope };
                        }
                    });
                }
            }
            Op::Modulate { x, scale, shift } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let bc = s[0] * s[1];
                let (tx, ts) = (self.value(*x).data(), self.value(*scale).data());
                let g = dy.data();
                if self.wants(*x) {
                    self.accumulate_with(slots, *x, |acc| {
                        for p in 0..bc {
                            for q in p * plane..(p + 1) * plane {
                                acc[q] = acc[q] + g[q] * ts[p];
                            }
                        }
                    });
                }
                if self.wants(*scale) {
                    self.accumulate_with(slots, *scale, |acc| {
                        for p in 0..bc {
                            let r = &(p * plane..(p + 1) * plane);
                            let d: T = g[r.clone()].iter().zip(&tx[r.clone()]).map(|(&a, &b)| a * b).sum();
                            acc[p] = acc[p] + d;
                        }
                    });
                }
                if self.wants(*shift) {
                    self.accumulate_with(slots, *shift, |acc| {
                        for p in 0..bc {
                            let d: T = g[p * plane..(p + 1) * plane].iter().copied().sum();
                            acc[p] = acc[p] + d;
                        }
                    });
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let n = T::lit(plane as f64);
                    let y = node.value.data();
                    let g = dy.data();
                    self.accumulate_with(slots, *x, |acc| {
                        for (p, &inv) in inv_std.iter().enumerate() {
                            let r = p * plane..(p + 1) * plane;
                            let gm = g[r.clone()].iter().copied().sum::<T>() / n;
                            let gy = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum::<T>() / n;
                            for q in r {
                                acc[q] = acc[q] + inv * (g[q] - gm - y[q] * gy);
                            }
                        }
                    });
                }
            }
            Op::AddNoise { x, noise, strength } => {
                if self.wants(*x) {
                    self.accumulate(slots, *x, dy.clone());
                }
                if self.wants(*strength) {
                    let s = self.shape(*x);
                    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let g = dy.data();
                    let mut total = T::zero();
                    for bi in 0..b {
                        let nz = &noise.data()[bi * plane..(bi + 1) * plane];
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            total = total + g[off..off + plane].iter().zip(nz).map(|(&a, &z)| a * z).sum::<T>();
                        }
                    }
                    self.accumulate(slots, *strength, Tensor::new(self.shape(*strength), vec![total]).expect("scalar"));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let n = T::lit(plane as f64);
                    let g = dy.data();
                    self.accumulate_with(slots, *x, |acc| {
                        for (p, &gv) in g.iter().enumerate() {
                            let share = gv / n;
                            for a in &mut acc[p * plane..(p + 1) * plane] {
                                *a = *a + share;
                            }
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let g = dy.data();
                        self.accumulate_with(slots, v, |acc| {
                            for o in 0..outer {
                                for k in 0..len {
                                    acc[o * len + k] = acc[o * len + k] + g[o * total + offset + k];
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::GatherRows { sources, picks } => {
                let width = node.value.row_len();
                let g = dy.data();
                for (si, &src) in sources.iter().enumerate() {
                    if !self.wants(src) {
                        continue;
                    }
                    self.accumulate_with(slots, src, |acc| {
                        for (k, &(s, r)) in picks.iter().enumerate() {
                            if s == si {
                                for j in 0..width {
                                    acc[r * width + j] = acc[r * width + j] + g[k * width + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(slots, *x, dy.clone().reshape(&shape).expect("same numel"));
                }
            }
            Op::InterpWeights { s, coef } => {
                if self.wants(*s) {
                    let ts = self.value(*s).data();
                    let d = ts.len();
                    let g = dy.data();
                    self.accumulate_with(slots, *s, |acc| {
                        for (j, &sv) in ts.iter().enumerate() {
                            let sg = kernels::sigmoid(sv);
                            let ds = sg * (T::one() - sg);
                            let mut tot = T::zero();
                            for (r, &c) in coef.iter().enumerate() {
                                tot = tot + g[r * d + j] * c;
                            }
                            acc[j] = acc[j] + tot * ds;
                        }
                    });
                }
            }
            Op::Softplus(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    self.accumulate_with(slots, *x, |acc| {
                        for ((s, &g), &v) in acc.iter_mut().zip(dy.data()).zip(tx.data()) {
                            *s = *s + g * kernels::sigmoid(v);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let g = dy.item();
                    self.accumulate_with(slots, *x, |acc| acc.iter_mut().for_each(|a| *a = *a + g));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let g = dy.item() / T::lit(self.value(*x).numel() as f64);
                    self.accumulate_with(slots, *x, |acc| acc.iter_mut().for_each(|a| *a = *a + g));
                }
            }
            Op::SumSq(x) => {
                if self.wants(*x) {
                    let g = dy.item();
                    let two = T::lit(2.0);
                    let tx = self.value(*x);
                    self.accumulate_with(slots, *x, |acc| {
                        for (a, &v) in acc.iter_mut().zip(tx.data()) {
                            *a = *a + two * v * g;
                        }
                    });
                }
            }
            Op::GatherElems { x, idx } => {
                if self.wants(*x) {
                    let g = dy.data();
                    self.accumulate_with(slots, *x, |acc| {
                        for (k, &i) in idx.iter().enumerate() {
                            if i >= 0 {
                                acc[i as usize] = acc[i as usize] + g[k];
                            }
                        }
                    });
                }
            }
        }
    }
}
