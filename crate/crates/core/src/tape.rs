//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so reverse
//! iteration over the record is a valid reverse topological order.
//! [`Tape::backward`] consumes the tape and returns the [`Gradients`] of every
//! node that transitively depends on a `requires_grad` leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::linalg::Lu;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumPerSample(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    PoolDown(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        bias: Var,
    },
    LogAbsSum(Var),
    /// Keeps the factorization for the reverse pass.
    LogAbsDet(Var, Lu),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive ops with the values needed for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Sum over every axis except the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().first().ok_or(TensorError::Rank {
            op: "sum_per_sample",
            expected: 1,
            shape: Vec::new(),
        })?;
        let per = t.len() / n.max(1);
        let v = Tensor::from_fn(&[n], |i| t.data()[i * per..(i + 1) * per].iter().sum());
        Ok(self.push(v, Op::SumPerSample(a), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Cross-correlation of `[N, C, H, W]` with a `[Cout, C, kh, kw]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let v = kernels::conv2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// 2x2 average pooling.
    pub fn pool_down(&mut self, a: Var) -> Result<Var> {
        let v = kernels::pool_down(self.value(a))?;
        Ok(self.push(v, Op::PoolDown(a), &[a]))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample(&mut self, a: Var) -> Result<Var> {
        let v = kernels::upsample(self.value(a))?;
        Ok(self.push(v, Op::Upsample(a), &[a]))
    }

    /// Channel-axis concatenation of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_channels(&vals)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_channels(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceChannels { x, start }, &[x]))
    }

    /// `scale[c] * (x + bias[c])` per channel.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let v = kernels::channel_affine(self.value(x), self.value(scale), self.value(bias))?;
        Ok(self.push(v, Op::ChannelAffine { x, scale, bias }, &[x, scale, bias]))
    }

    /// `sum(log|a|)` as a scalar.
    pub fn log_abs_sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| libm::log(x.abs())).sum());
        self.push(v, Op::LogAbsSum(a), &[a])
    }

    /// `log|det M|` of a square matrix stored as `[C, C]` or `[C, C, 1, 1]`.
    pub fn log_abs_det(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        let c = square_dim(t)?;
        let lu = Lu::new(t.data(), c)?;
        let v = Tensor::scalar(lu.log_abs_det());
        Ok(self.push(v, Op::LogAbsDet(m, lu), &[m]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n_nodes = self.nodes.len();
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.scale(-1.0));
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), gv));
                }
                Op::SumPerSample(a) => {
                    let t = val(*a);
                    let per = t.len() / g.len().max(1);
                    let gd = g.data();
                    let d = Tensor::from_fn(t.shape(), |i| gd[i / per]);
                    accumulate(&mut grads[a.0], d);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                    accumulate(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y)?;
                    accumulate(&mut grads[a.0], d);
                }
                Op::Conv2d {
                    x,
                    k,
                    bias,
                    stride,
                    pad,
                } => {
                    let need_b = bias.is_some_and(needs);
                    let cg = kernels::conv2d_backward(
                        val(*x),
                        val(*k),
                        &g,
                        *stride,
                        *pad,
                        (needs(*x), needs(*k), need_b),
                    )?;
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dk) = cg.dk {
                        accumulate(&mut grads[k.0], dk);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::PoolDown(a) => {
                    accumulate(&mut grads[a.0], kernels::pool_down_backward(&g)?);
                }
                Op::Upsample(a) => {
                    accumulate(&mut grads[a.0], kernels::upsample_backward(&g)?);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = val(*p).shape()[1];
                        if needs(*p) {
                            let d = kernels::slice_channels(&g, start, c)?;
                            accumulate(&mut grads[p.0], d);
                        }
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (n, c, h, w) = val(*x).dims4()?;
                    let len = g.shape()[1];
                    let hw = h * w;
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        d.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
                            .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::ChannelAffine { x, scale, bias } => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let (sv, bv) = (val(*scale).data(), val(*bias).data());
                    let mut ds = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    let mut dx = g.data().to_vec();
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let gs = &g.data()[off..off + hw];
                            let xs = &xv.data()[off..off + hw];
                            let gsum: f64 = gs.iter().sum();
                            ds[ch] += gs.iter().zip(xs).map(|(gv, xv)| gv * (xv + bv[ch])).sum::<f64>();
                            db[ch] += gsum * sv[ch];
                            dx[off..off + hw].iter_mut().for_each(|v| *v *= sv[ch]);
                        }
                    }
                    if needs(*x) {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape(), dx)?);
                    }
                    if needs(*scale) {
                        accumulate(&mut grads[scale.0], Tensor::new(&[c], ds)?);
                    }
                    if needs(*bias) {
                        accumulate(&mut grads[bias.0], Tensor::new(&[c], db)?);
                    }
                }
                Op::LogAbsSum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads[a.0], val(*a).map(|x| gv / x));
                }
                Op::LogAbsDet(m, lu) => {
                    // d log|det M| / dM = M^{-T}
                    let t = val(*m);
                    let c = square_dim(t)?;
                    let inv = lu.inverse();
                    let gv = g.item();
                    let d = Tensor::from_fn(t.shape(), |idx| {
                        let (i, j) = (idx / c, idx % c);
                        gv * inv[j * c + i]
                    });
                    accumulate(&mut grads[m.0], d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn square_dim(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [a, b] | [a, b, 1, 1] if a == b => Ok(*a),
        s => Err(TensorError::Invalid {
            op: "log_abs_det",
            msg: alloc::format!("expected a square matrix, got shape {s:?}"),
        }),
    }
}
