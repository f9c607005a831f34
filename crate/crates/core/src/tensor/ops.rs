use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::conv::{self, ConvGeom};
use crate::tensor::tape::{split_axis, Activation, BinaryKind, Op, PoolKind, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Batch-norm mode. `Train` normalizes with batch statistics; `Eval` with the
/// supplied running statistics.
#[derive(Clone, Debug)]
pub enum NormMode<'a, T> {
    Train { eps: T },
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics from a training-mode batch norm.
/// `var` is the unbiased estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [k, wc, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{k}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![n, k, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm2d", format!("affine params must be [{c}]")));
        }
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, inv_std, stats, batch_stats) = match mode {
            NormMode::Train { eps } => {
                if count < 2 {
                    return Err(Error::shape(
                        "batchnorm2d",
                        "training mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        s += xv[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(count as f64);
                    let mut q = T::zero();
                    for ni in 0..n {
                        for &v in &xv[(ni * c + ci) * plane..][..plane] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = q / T::lit(count as f64);
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased = T::lit(count as f64 / (count - 1) as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, inv_std, Some(stats), true)
            }
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", "running stats length mismatch"));
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (k, m, g, b) = (inv_std[ci], mean[ci], gv[ci], bv[ci]);
                for p in base..base + plane {
                    out[p] = g * ((xv[p] - m) * k) + b;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| match kind {
            Activation::Sigmoid => sigmoid(v),
            Activation::Silu => v * sigmoid(v),
            Activation::Relu => v.max(T::zero()),
        });
        self.push(value, Op::Activation { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Atan => v.atan(),
            UnaryKind::Square => v * v,
            UnaryKind::Neg => -v,
        });
        self.push(value, Op::Unary { x, kind })
    }

    /// Elementwise binary op on equal shapes.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "binary",
                format!("{kind:?} of {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::Max => x.max(y),
                BinaryKind::Min => x.min(y),
            })
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::MulScalar { x, s })
    }

    /// Broadcast product of a feature map with a per-channel gate `[N,C,1,1]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(Error::shape(
                "mul_channel",
                format!("gate {:?} does not broadcast over {:?}", self.shape(gate), [n, c, h, w]),
            ));
        }
        let plane = h * w;
        let gv = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / plane])
            .collect();
        let value = Tensor::from_parts(vec![n, c, h, w], data);
        Ok(self.push(value, Op::MulChannel { x, g: gate }))
    }

    /// Broadcast product of a feature map with a per-pixel gate `[N,1,H,W]`.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_spatial",
                format!("gate {:?} does not broadcast over {:?}", self.shape(gate), [n, c, h, w]),
            ));
        }
        let plane = h * w;
        let gv = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[(i / (c * plane)) * plane + i % plane])
            .collect();
        let value = Tensor::from_parts(vec![n, c, h, w], data);
        Ok(self.push(value, Op::MulSpatial { x, g: gate }))
    }

    /// Reduces each channel plane to one value: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn pool_global(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for nc in 0..n * c {
            let sl = &xv[nc * plane..(nc + 1) * plane];
            match kind {
                PoolKind::Avg => out.push(sl.iter().copied().sum::<T>() / T::lit(plane as f64)),
                PoolKind::Max => {
                    let (idx, best) = first_argmax(sl);
                    out.push(best);
                    argmax.push(nc * plane + idx);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, 1, 1], out);
        Ok(self.push(value, Op::GlobalPool { x, kind, argmax }))
    }

    /// Reduces across channels at every pixel: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn pool_channel(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * plane);
        let mut argmax = Vec::new();
        for ni in 0..n {
            for p in 0..plane {
                let at = |ci: usize| (ni * c + ci) * plane + p;
                match kind {
                    PoolKind::Avg => {
                        let s: T = (0..c).map(|ci| xv[at(ci)]).sum();
                        out.push(s / T::lit(c as f64));
                    }
                    PoolKind::Max => {
                        let mut best = 0;
                        for ci in 1..c {
                            if xv[at(ci)] > xv[at(best)] {
                                best = ci;
                            }
                        }
                        out.push(xv[at(best)]);
                        argmax.push(at(best));
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 1, h, w], out);
        Ok(self.push(value, Op::ChannelPool { x, kind, argmax }))
    }

    /// Spatial max pooling; padded positions never win. Ties go to the first
    /// element in scan order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel == 0 || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding || padding >= kernel {
            return Err(Error::shape(
                "maxpool2d",
                format!("kernel {kernel} stride {stride} padding {padding} on {h}x{w}"),
            ));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for i in 0..kernel {
                        let y = (oy * stride + i) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let xx = (ox * stride + j) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = (nc * h + y as usize) * w + xx as usize;
                            if best.map_or(true, |(_, b)| xv[idx] > b) {
                                best = Some((idx, xv[idx]));
                            }
                        }
                    }
                    let (idx, v) = best.expect("window overlaps input");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) of axis {axis} in {xs:?}", start + len)));
        }
        let (outer, total, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(xv[(nc * h + y / 2) * w + xx / 2]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::Upsample2x { x }))
    }

    /// Affine map over the trailing axis: `[.., D] x [E, D]^T + b -> [.., E]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [e, d] = ws[..] else {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {ws:?}")));
        };
        if *xs.last().expect("non-empty shape") != d {
            return Err(Error::shape("linear", format!("input {xs:?} trailing extent != {d}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [e] {
                return Err(Error::shape("linear", format!("bias {:?} != [{e}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / d;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(rows * e);
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            for k in 0..e {
                let mut acc: T = xr.iter().zip(&wv[k * d..(k + 1) * d]).map(|(&a, &b)| a * b).sum();
                if let Some(bv) = bv {
                    acc += bv[k];
                }
                out.push(acc);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = e;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("softmax_axis", format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xv[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xv[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[idx(k)] /= s;
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        self.push(value, Op::Mean { x })
    }

    /// Picks the channel vectors of `(n, y, x)` cells: `[N,C,H,W] -> [M,C]`.
    pub fn gather_cells(&mut self, x: Var, cells: &[(usize, usize, usize)]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if cells.is_empty() {
            return Err(Error::shape("gather_cells", "no cells"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(cells.len() * c);
        for &(ni, y, xx) in cells {
            if ni >= n || y >= h || xx >= w {
                return Err(Error::shape("gather_cells", format!("cell {:?} outside {:?}", (ni, y, xx), (n, h, w))));
            }
            for ci in 0..c {
                out.push(xv[((ni * c + ci) * h + y) * w + xx]);
            }
        }
        let value = Tensor::from_parts(vec![cells.len(), c], out);
        Ok(self.push(
            value,
            Op::GatherCells {
                x,
                cells: cells.to_vec(),
            },
        ))
    }

    /// `sum(weight * bce(sigmoid(logits), targets))` in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, weight: T) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let total: T = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let value = Tensor::scalar(weight * total);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                weight,
            },
        ))
    }

    /// Summed distribution focal loss over rows of bin logits `[.., bins]`.
    /// `targets` holds one continuous target in `[0, bins-1]` per row.
    pub fn dfl_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let bins = *shape.last().expect("non-empty");
        let rows = self.value(logits).numel() / bins;
        if targets.len() != rows || bins < 2 {
            return Err(Error::shape("dfl", format!("{rows} rows of {bins} bins vs {} targets", targets.len())));
        }
        let hi = T::lit((bins - 1) as f64);
        let xv = self.value(logits).data();
        let mut probs = vec![T::zero(); xv.len()];
        let (mut lower, mut w_lower, mut w_upper) = (Vec::new(), Vec::new(), Vec::new());
        let mut total = T::zero();
        for r in 0..rows {
            let y = targets[r];
            if !(y >= T::zero() && y <= hi) {
                return Err(Error::InvalidArgument(format!("dfl target {y} outside [0, {hi}]")));
            }
            let row = &xv[r * bins..(r + 1) * bins];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (k, &v) in row.iter().enumerate() {
                probs[r * bins + k] = (v - lse).exp();
            }
            let lo = y.floor().to_usize().expect("non-negative").min(bins - 2);
            let wr = y - T::lit(lo as f64);
            let wl = T::one() - wr;
            total -= wl * (row[lo] - lse) + wr * (row[lo + 1] - lse);
            lower.push(lo);
            w_lower.push(wl);
            w_upper.push(wr);
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::DflLogits {
                logits,
                bins,
                probs,
                lower,
                w_lower,
                w_upper,
            },
        ))
    }
}

fn first_argmax<T: Real>(values: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}
