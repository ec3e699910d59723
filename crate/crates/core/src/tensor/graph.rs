use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use super::conv::{self, ConvShape};
use super::real::Real;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(alloc::format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a dropout node treats its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// Random masking while fitting parameters.
    Train,
    /// Random masking at inference, for Monte-Carlo sampling.
    Sample,
    /// Identity; the generator is not touched.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    MinPair(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Exp(Var),
    Prelu {
        x: Var,
        alpha: Var,
        channels: usize,
        plane: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, AxisSplit),
    MinAxis {
        x: Var,
        split: AxisSplit,
        argmin: Vec<usize>,
    },
    Reshape(Var),
    Stack {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        shape: ConvShape,
    },
    ChannelBias {
        x: Var,
        bias: Var,
        channels: usize,
        plane: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the tape itself is a
/// topological order and `backward` visits every reachable node exactly once,
/// walking indices downwards from the root.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((Broadcast::Same, sa.to_vec()))
        } else if numel(sb) == 1 {
            Ok((Broadcast::RightScalar, sa.to_vec()))
        } else if numel(sa) == 1 {
            Ok((Broadcast::LeftScalar, sb.to_vec()))
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (bc, shape) = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match bc {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::LeftScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, make(a, b, bc), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties pass the gradient to `a`.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("min_pair", self.shape(a), self.shape(b)));
        }
        self.zip_with("min_pair", a, b, |x, y| if y < x { y } else { x }, |a, b, _| {
            Op::MinPair(a, b)
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::ZERO { v } else { T::ZERO }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    /// Parametric ReLU with one slope per channel (axis 1), or a single shared slope.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let na = self.value(alpha).numel();
        let channels = if na == 1 {
            1
        } else if shape.len() >= 2 && shape[1] == na {
            na
        } else {
            return Err(Error::shape("prelu", &[na], &shape));
        };
        let plane = if channels == 1 {
            numel(&shape)
        } else {
            numel(&shape[2..])
        };
        let xs = self.value(x).data();
        let al = self.value(alpha).data();
        let mut data: Vec<T> = Vec::with_capacity(xs.len());
        for (p, chunk) in xs.chunks_exact(plane).enumerate() {
            let a = al[p % channels];
            data.extend(chunk.iter().map(|&v| if v > T::ZERO { v } else { a * v }));
        }
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(
            Tensor { shape, data },
            Op::Prelu {
                x,
                alpha,
                channels,
                plane,
            },
            rg,
        ))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::from_f64(s / n as f64)), Op::Mean(x), rg))
    }

    fn split(&self, op: &'static str, x: Var, axis: usize) -> Result<(AxisSplit, Vec<usize>)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::contract(alloc::format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::contract(alloc::format!("{op}: empty axis {axis}")));
        }
        let split = AxisSplit {
            outer: numel(&shape[..axis]),
            len: shape[axis],
            inner: numel(&shape[axis + 1..]),
        };
        let mut out = shape.to_vec();
        out.remove(axis);
        Ok((split, out))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (sp, shape) = self.split("sum_axis", x, axis)?;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(sp.outer * sp.inner);
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let s: f64 = (0..sp.len)
                    .map(|l| xs[(o * sp.len + l) * sp.inner + i].to_f64())
                    .sum();
                data.push(T::from_f64(s));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(x, sp), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::contract("mean_axis: axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, T::from_f64(1.0 / len as f64)))
    }

    /// Minimum over `axis` together with the winning index of every lane.
    ///
    /// Ties resolve to the lowest index. The backward pass routes the incoming
    /// gradient exclusively to the winner.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let (sp, shape) = self.split("min_axis", x, axis)?;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(sp.outer * sp.inner);
        let mut argmin = Vec::with_capacity(sp.outer * sp.inner);
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let mut best = 0;
                let mut best_v = xs[o * sp.len * sp.inner + i];
                for l in 1..sp.len {
                    let v = xs[(o * sp.len + l) * sp.inner + i];
                    if v < best_v {
                        best = l;
                        best_v = v;
                    }
                }
                data.push(best_v);
                argmin.push(best);
            }
        }
        let rg = self.rg(x);
        let out = self.push(
            Tensor { shape, data },
            Op::MinAxis {
                x,
                split: sp,
                argmin: argmin.clone(),
            },
            rg,
        );
        Ok((out, argmin))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
            rg,
        ))
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::contract("stack: axis out of range"));
        }
        for p in parts {
            if self.shape(*p) != base.as_slice() {
                return Err(Error::shape("stack", &base, self.shape(*p)));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis..]);
        let mut data = Vec::with_capacity(outer * inner * parts.len());
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&self.value(*p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, parts.len());
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Stack {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Concatenate along an existing axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat: axis out of range"));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut total = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
            widths.push(s[axis] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Same-padded 2D cross-correlation of `[N, C, H, W]` with `[F, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::contract("conv2d expects rank-4 input and kernel"));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape("conv2d", &[ks[0], xs[1], ks[2], ks[3]], &ks));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::contract("conv2d kernel must be square with odd size"));
        }
        if dilation == 0 {
            return Err(Error::contract("conv2d dilation must be at least 1"));
        }
        let shape = ConvShape {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            k: ks[2],
            dilation,
        };
        let data = conv::forward(self.value(x).data(), self.value(kernel).data(), &shape);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor {
                shape: vec![shape.n, shape.f, shape.h, shape.w],
                data,
            },
            Op::Conv2d { x, kernel, shape },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = self.value(bias).numel();
        if shape.len() < 2 || shape[1] != channels {
            return Err(Error::shape("add_channel_bias", &[channels], &shape));
        }
        let plane = numel(&shape[2..]);
        let b = self.value(bias).data();
        let xs = self.value(x).data();
        let mut data: Vec<T> = Vec::with_capacity(xs.len());
        for (p, chunk) in xs.chunks_exact(plane.max(1)).enumerate() {
            let bv = b[p % channels];
            data.extend(chunk.iter().map(|&v| v + bv));
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data },
            Op::ChannelBias {
                x,
                bias,
                channels,
                plane,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: DropoutMode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == DropoutMode::Off || rate == 0.0 {
            let mask = vec![T::ONE; self.value(x).numel()];
            let data = self.value(x).data().to_vec();
            let shape = self.shape(x).to_vec();
            let rg = self.rg(x);
            return Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, rg));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < rate { T::ZERO } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, rg))
    }

    fn add_grad(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn add_grad_owned(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn add_grad_broadcast(&mut self, v: Var, contrib: Vec<T>, scalar: bool) {
        if scalar {
            let s: f64 = contrib.iter().map(|c| c.to_f64()).sum();
            self.add_grad(v, &[T::from_f64(s)]);
        } else {
            self.add_grad_owned(v, contrib);
        }
    }

    /// Reverse-mode sweep from a one-element root. Gradients from any previous
    /// sweep are discarded first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", &[1], self.shape(root)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if self.rg(*a) {
                    self.add_grad_broadcast(*a, g.to_vec(), *bc == Broadcast::LeftScalar);
                }
                if self.rg(*b) {
                    self.add_grad_broadcast(*b, g.to_vec(), *bc == Broadcast::RightScalar);
                }
            }
            Op::Sub(a, b, bc) => {
                self.add_grad_broadcast(*a, g.to_vec(), *bc == Broadcast::LeftScalar);
                let neg = g.iter().map(|&v| -v).collect();
                self.add_grad_broadcast(*b, neg, *bc == Broadcast::RightScalar);
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let ga: Vec<T> = if self.rg(*a) {
                    g.iter().enumerate().map(|(i, &gi)| gi * pick(vb, i)).collect()
                } else {
                    Vec::new()
                };
                let gb: Vec<T> = if self.rg(*b) {
                    g.iter().enumerate().map(|(i, &gi)| gi * pick(va, i)).collect()
                } else {
                    Vec::new()
                };
                if !ga.is_empty() {
                    self.add_grad_broadcast(*a, ga, *bc == Broadcast::LeftScalar);
                }
                if !gb.is_empty() {
                    self.add_grad_broadcast(*b, gb, *bc == Broadcast::RightScalar);
                }
            }
            Op::MinPair(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::ZERO; g.len()];
                let mut gb = vec![T::ZERO; g.len()];
                for i in 0..g.len() {
                    if vb[i] < va[i] {
                        gb[i] = g[i];
                    } else {
                        ga[i] = g[i];
                    }
                }
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Op::AddScalar(x) => self.add_grad(*x, g),
            Op::MulScalar(x, s) => {
                let c: Vec<T> = g.iter().map(|&v| v * *s).collect();
                self.add_grad_owned(*x, c);
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                let c: Vec<T> = g
                    .iter()
                    .zip(xs)
                    .map(|(&gi, &v)| {
                        if v > T::ZERO {
                            gi
                        } else if v < T::ZERO {
                            -gi
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.add_grad_owned(*x, c);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let c: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &v)| two * v * gi)
                    .collect();
                self.add_grad_owned(*x, c);
            }
            Op::Relu(x) => {
                let c: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &v)| if v > T::ZERO { gi } else { T::ZERO })
                    .collect();
                self.add_grad_owned(*x, c);
            }
            Op::Exp(x) => {
                let out = self.nodes[node].value.data();
                let c: Vec<T> = g.iter().zip(out).map(|(&gi, &y)| gi * y).collect();
                self.add_grad_owned(*x, c);
            }
            Op::Prelu {
                x,
                alpha,
                channels,
                plane,
            } => {
                let xs = self.value(*x).data();
                let al = self.value(*alpha).data();
                let mut gx = Vec::new();
                if self.rg(*x) {
                    gx.reserve(g.len());
                    for (p, (gc, xc)) in g.chunks_exact(*plane).zip(xs.chunks_exact(*plane)).enumerate() {
                        let a = al[p % channels];
                        gx.extend(
                            gc.iter()
                                .zip(xc)
                                .map(|(&gi, &v)| if v > T::ZERO { gi } else { a * gi }),
                        );
                    }
                }
                let mut ga = Vec::new();
                if self.rg(*alpha) {
                    let mut acc = vec![0.0f64; *channels];
                    for (p, (gc, xc)) in g.chunks_exact(*plane).zip(xs.chunks_exact(*plane)).enumerate() {
                        let mut s = 0.0f64;
                        for (&gi, &v) in gc.iter().zip(xc) {
                            if v <= T::ZERO {
                                s += (gi * v).to_f64();
                            }
                        }
                        acc[p % channels] += s;
                    }
                    ga = acc.into_iter().map(T::from_f64).collect();
                }
                if !gx.is_empty() {
                    self.add_grad_owned(*x, gx);
                }
                if !ga.is_empty() {
                    self.add_grad_owned(*alpha, ga);
                }
            }
            Op::Sum(x) => {
                let c = vec![g[0]; self.value(*x).numel()];
                self.add_grad_owned(*x, c);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let c = vec![g[0] * T::from_f64(1.0 / n as f64); n];
                self.add_grad_owned(*x, c);
            }
            Op::SumAxis(x, sp) => {
                let mut c = vec![T::ZERO; sp.outer * sp.len * sp.inner];
                for o in 0..sp.outer {
                    for l in 0..sp.len {
                        let dst = &mut c[(o * sp.len + l) * sp.inner..][..sp.inner];
                        dst.copy_from_slice(&g[o * sp.inner..(o + 1) * sp.inner]);
                    }
                }
                self.add_grad_owned(*x, c);
            }
            Op::MinAxis { x, split, argmin } => {
                let mut c = vec![T::ZERO; split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let lane = o * split.inner + i;
                        c[(o * split.len + argmin[lane]) * split.inner + i] = g[lane];
                    }
                }
                self.add_grad_owned(*x, c);
            }
            Op::Reshape(x) => self.add_grad(*x, g),
            Op::Stack {
                parts,
                outer,
                inner,
            } => {
                let np = parts.len();
                for (p, part) in parts.iter().enumerate() {
                    if !self.rg(*part) {
                        continue;
                    }
                    let mut c = Vec::with_capacity(outer * inner);
                    for o in 0..*outer {
                        c.extend_from_slice(&g[(o * np + p) * inner..][..*inner]);
                    }
                    self.add_grad(*part, &c);
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (part, &wd) in parts.iter().zip(widths) {
                    if self.rg(*part) {
                        let mut c = Vec::with_capacity(outer * wd);
                        for o in 0..*outer {
                            c.extend_from_slice(&g[o * total + offset..][..wd]);
                        }
                        self.add_grad(*part, &c);
                    }
                    offset += wd;
                }
            }
            Op::Conv2d { x, kernel, shape } => {
                let (need_x, need_k) = (self.rg(*x), self.rg(*kernel));
                let (gx, gk) = conv::backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    shape,
                    need_x,
                    need_k,
                );
                if let Some(gx) = gx {
                    self.add_grad_owned(*x, gx);
                }
                if let Some(gk) = gk {
                    self.add_grad_owned(*kernel, gk);
                }
            }
            Op::ChannelBias {
                x,
                bias,
                channels,
                plane,
            } => {
                self.add_grad(*x, g);
                if self.rg(*bias) {
                    let mut acc = vec![0.0f64; *channels];
                    for (p, gc) in g.chunks_exact((*plane).max(1)).enumerate() {
                        acc[p % channels] += gc.iter().map(|v| v.to_f64()).sum::<f64>();
                    }
                    let c: Vec<T> = acc.into_iter().map(T::from_f64).collect();
                    self.add_grad(*bias, &c);
                }
            }
            Op::Dropout { x, mask } => {
                let c: Vec<T> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.add_grad_owned(*x, c);
            }
        }
    }
}
