//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced while it is active. Operations append a
//! node holding the result and whatever the backward rule needs; [`Tape::backward`]
//! then walks the nodes in reverse creation order.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::conv::ConvGeom;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Atan,
    Square,
    Neg,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: T,
    },
    /// `x[N,C,H,W] * g[N,C,1,1]`
    MulChannel {
        x: Var,
        g: Var,
    },
    /// `x[N,C,H,W] * g[N,1,H,W]`
    MulSpatial {
        x: Var,
        g: Var,
    },
    GlobalPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    GatherCells {
        x: Var,
        cells: Vec<(usize, usize, usize)>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        weight: T,
    },
    DflLogits {
        logits: Var,
        bins: usize,
        probs: Vec<T>,
        lower: Vec<usize>,
        w_lower: Vec<T>,
        w_upper: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Binary { a, b, .. } => vec![*a, *b],
            MulChannel { x, g } | MulSpatial { x, g } => vec![*x, *g],
            Concat { inputs, .. } => inputs.clone(),
            Activation { x, .. }
            | Unary { x, .. }
            | AddScalar { x }
            | MulScalar { x, .. }
            | GlobalPool { x, .. }
            | ChannelPool { x, .. }
            | MaxPool2d { x, .. }
            | Slice { x, .. }
            | Reshape { x }
            | Upsample2x { x }
            | Softmax { x, .. }
            | Sum { x }
            | Mean { x }
            | GatherCells { x, .. } => vec![*x],
            BceWithLogits { logits, .. } | DflLogits { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Conv2d { .. } => "conv2d",
            BatchNorm { .. } => "batchnorm2d",
            Activation { .. } => "activation",
            Unary { .. } => "unary",
            Binary { .. } => "binary",
            AddScalar { .. } => "add_scalar",
            MulScalar { .. } => "mul_scalar",
            MulChannel { .. } => "mul_channel",
            MulSpatial { .. } => "mul_spatial",
            GlobalPool { .. } => "pool_global",
            ChannelPool { .. } => "pool_channel",
            MaxPool2d { .. } => "maxpool2d",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Reshape { .. } => "reshape",
            Upsample2x { .. } => "upsample_nearest2x",
            Linear { .. } => "linear",
            Softmax { .. } => "softmax_axis",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            GatherCells { .. } => "gather_cells",
            BceWithLogits { .. } => "bce_with_logits",
            DflLogits { .. } => "dfl",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Operation record for reverse-mode differentiation.
///
/// Confined to one execution context. `backward` may run once; call
/// [`Tape::reset_grads`] before running it again.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires grad
    /// and the loss depends on it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Floating-point operations of the recorded multiply-accumulate ops
    /// (convolutions and linear maps), counted as two per MAC.
    pub fn flops(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| match &node.op {
                Op::Conv2d { geom, .. } => 2 * geom.macs(),
                Op::Linear { w, .. } => {
                    let ws = self.nodes[w.0].value.shape();
                    2 * (node.value.numel() * ws[1]) as u64
                }
                _ => 0,
            })
            .sum()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Populates gradients of the scalar `loss` w.r.t. every reachable
    /// tensor that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss does not depend on any trainable tensor".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                for (v, contrib) in self.node_backward(i, &g) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.val(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.val(*w).len()]);
                let mut db = b
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![T::zero(); self.val(b).len()]);
                crate::tensor::conv::backward(
                    self.val(*x),
                    self.val(*w),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    res.push((*b, d));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("bn input rank 4");
                let plane = h * w;
                let m = T::lit((n * plane) as f64);
                let xv = self.val(*x);
                let gm = self.val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                            dgamma[ci] += g[base + p] * xhat;
                            dbeta[ci] += g[base + p];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let k = gm[ci] * inv_std[ci];
                            for p in 0..plane {
                                dx[base + p] = if *batch_stats {
                                    let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                                    k / m * (m * g[base + p] - dbeta[ci] - xhat * dgamma[ci])
                                } else {
                                    k * g[base + p]
                                };
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
            }
            Op::Activation { x, kind } => {
                let xv = self.val(*x);
                let d = match kind {
                    Activation::Sigmoid => out.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect(),
                    Activation::Silu => xv
                        .iter()
                        .zip(g)
                        .map(|(&xi, &gv)| {
                            let s = crate::tensor::ops::sigmoid(xi);
                            gv * (s + xi * s * (T::one() - s))
                        })
                        .collect(),
                    Activation::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&xi, &gv)| if xi > T::zero() { gv } else { T::zero() })
                        .collect(),
                };
                res.push((*x, d));
            }
            Op::Unary { x, kind } => {
                let xv = self.val(*x);
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gv)| match kind {
                        UnaryKind::Atan => gv / (T::one() + xi * xi),
                        UnaryKind::Square => gv * (xi + xi),
                        UnaryKind::Neg => -gv,
                    })
                    .collect();
                res.push((*x, d));
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (mut da, mut db) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
                for ((&x, &y), &gv) in av.iter().zip(bv).zip(g) {
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * y, gv * x),
                        BinaryKind::Div => (gv / y, -gv * x / (y * y)),
                        BinaryKind::Max => {
                            if x >= y {
                                (gv, T::zero())
                            } else {
                                (T::zero(), gv)
                            }
                        }
                        BinaryKind::Min => {
                            if x <= y {
                                (gv, T::zero())
                            } else {
                                (T::zero(), gv)
                            }
                        }
                    };
                    da.push(ga);
                    db.push(gb);
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::AddScalar { x } => res.push((*x, g.to_vec())),
            Op::MulScalar { x, s } => res.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::MulChannel { x, g: gate } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let plane = h * w;
                let (xv, gv) = (self.val(*x), self.val(*gate));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for nc in 0..n * c {
                    let s = gv[nc];
                    let mut acc = T::zero();
                    for p in nc * plane..(nc + 1) * plane {
                        dx[p] = g[p] * s;
                        acc += g[p] * xv[p];
                    }
                    dg[nc] = acc;
                }
                res.push((*x, dx));
                res.push((*gate, dg));
            }
            Op::MulSpatial { x, g: gate } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let plane = h * w;
                let (xv, gv) = (self.val(*x), self.val(*gate));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            dx[base + p] = g[base + p] * gv[ni * plane + p];
                            dg[ni * plane + p] += g[base + p] * xv[base + p];
                        }
                    }
                }
                res.push((*x, dx));
                res.push((*gate, dg));
            }
            Op::GlobalPool { x, kind, argmax } => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let plane = h * w;
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (nc, &gv) in g.iter().enumerate() {
                    match kind {
                        PoolKind::Avg => {
                            let s = gv / T::lit(plane as f64);
                            dx[nc * plane..(nc + 1) * plane].iter_mut().for_each(|d| *d = s);
                        }
                        PoolKind::Max => dx[argmax[nc]] += gv,
                    }
                }
                res.push((*x, dx));
            }
            Op::ChannelPool { x, kind, argmax } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let plane = h * w;
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for ni in 0..n {
                    for p in 0..plane {
                        let gv = g[ni * plane + p];
                        match kind {
                            PoolKind::Avg => {
                                let s = gv / T::lit(c as f64);
                                for ci in 0..c {
                                    dx[(ni * c + ci) * plane + p] = s;
                                }
                            }
                            PoolKind::Max => dx[argmax[ni * plane + p]] += gv,
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                res.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + len * inner]);
                        }
                        res.push((v, d));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, total, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let mut dx = vec![T::zero(); n * c * h * w];
                let ow = 2 * w;
                for nc in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dx[(nc * h + y / 2) * w + xx / 2] += g[(nc * 2 * h + y) * ow + xx];
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let ws = self.shape(*w);
                let (e, d) = (ws[0], ws[1]);
                let rows = xv.len() / d;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for r in 0..rows {
                        for k in 0..e {
                            crate::tensor::conv::axpy(g[r * e + k], &wv[k * d..(k + 1) * d], &mut dx[r * d..(r + 1) * d]);
                        }
                    }
                    res.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for r in 0..rows {
                        for k in 0..e {
                            crate::tensor::conv::axpy(g[r * e + k], &xv[r * d..(r + 1) * d], &mut dw[k * d..(k + 1) * d]);
                        }
                    }
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); e];
                    for r in 0..rows {
                        for k in 0..e {
                            db[k] += g[r * e + k];
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dotv: T = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dotv);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Sum { x } => res.push((*x, vec![g[0]; self.val(*x).len()])),
            Op::Mean { x } => {
                let n = self.val(*x).len();
                res.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::GatherCells { x, cells } => {
                let (_, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (m, &(ni, y, xx)) in cells.iter().enumerate() {
                    for ci in 0..c {
                        dx[((ni * c + ci) * h + y) * w + xx] += g[m * c + ci];
                    }
                }
                res.push((*x, dx));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weight,
            } => {
                let z = self.val(*logits);
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &y)| g[0] * *weight * (crate::tensor::ops::sigmoid(zi) - y))
                    .collect();
                res.push((*logits, d));
            }
            Op::DflLogits {
                logits,
                bins,
                probs,
                lower,
                w_lower,
                w_upper,
            } => {
                let mut d: Vec<T> = probs.clone();
                for (r, &lo) in lower.iter().enumerate() {
                    let row = &mut d[r * bins..(r + 1) * bins];
                    let s = w_lower[r] + w_upper[r];
                    row.iter_mut().for_each(|v| *v *= s);
                    row[lo] -= w_lower[r];
                    if lo + 1 < *bins {
                        row[lo + 1] -= w_upper[r];
                    }
                    row.iter_mut().for_each(|v| *v *= g[0]);
                }
                res.push((*logits, d));
            }
        }
        res
    }
}

/// `(outer, extent, inner)` around `axis` for row-major strides.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
