use rand::Rng;

use super::params::{BnUpdate, Ctx, ParamId, ParamKind, ParamStore};
use crate::attention::{self, AttentionVariant, CbamParams, CbamVars};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{NormMode, Tensor, Var};

/// Convolution (no bias) -> batch norm -> SiLU.
#[derive(Clone, Debug)]
pub struct Cbs {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Cbs {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            conv: store.add_uniform(
                format!("{name}.conv.weight"),
                ParamKind::Decay,
                vec![c_out, c_in, kernel, kernel],
                fan_in,
                rng,
            )?,
            gamma: store.add(format!("{name}.bn.gamma"), ParamKind::NoDecay, Tensor::full(vec![c_out], T::one()))?,
            beta: store.add(format!("{name}.bn.beta"), ParamKind::NoDecay, Tensor::zeros(vec![c_out]))?,
            running_mean: store.add(format!("{name}.bn.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![c_out]))?,
            running_var: store.add(
                format!("{name}.bn.running_var"),
                ParamKind::Buffer,
                Tensor::full(vec![c_out], T::one()),
            )?,
            kernel,
            stride,
        })
    }

    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.conv);
        let y = ctx.tape.conv2d(x, w, None, self.stride, self.kernel / 2)?;
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = ctx.bn_eps;
        let y = if ctx.bn_train {
            let (y, stats) = ctx.tape.batchnorm2d(y, gamma, beta, NormMode::Train { eps })?;
            if let Some(stats) = stats {
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
            }
            y
        } else {
            let store = ctx.store;
            let mode = NormMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
                eps,
            };
            ctx.tape.batchnorm2d(y, gamma, beta, mode)?.0
        };
        Ok(ctx.tape.silu(y))
    }
}

/// Two 3x3 CBS with an optional additive shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        shortcut: bool,
    ) -> Result<Self> {
        Ok(Self {
            cv1: Cbs::new(store, rng, &format!("{name}.cv1"), channels, channels, 3, 1)?,
            cv2: Cbs::new(store, rng, &format!("{name}.cv2"), channels, channels, 3, 1)?,
            shortcut,
        })
    }

    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        if self.shortcut {
            ctx.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// CBS, split in two halves, chained bottlenecks, concat of every branch, CBS.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: Cbs,
    pub blocks: Vec<Bottleneck>,
    pub cv2: Cbs,
    pub hidden: usize,
}

impl C2f {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::InvalidSpec(format!(
                "{name}: C2f output channels {c_out} cannot be split into two halves"
            )));
        }
        let hidden = c_out / 2;
        let cv1 = Cbs::new(store, rng, &format!("{name}.cv1"), c_in, 2 * hidden, 1, 1)?;
        let blocks = (0..n)
            .map(|i| Bottleneck::new(store, rng, &format!("{name}.m{i}"), hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        let cv2 = Cbs::new(store, rng, &format!("{name}.cv2"), (2 + n) * hidden, c_out, 1, 1)?;
        Ok(Self { cv1, blocks, cv2, hidden })
    }

    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let mut branches = vec![
            ctx.tape.slice(y, 1, 0, self.hidden)?,
            ctx.tape.slice(y, 1, self.hidden, self.hidden)?,
        ];
        for b in &self.blocks {
            let last = *branches.last().expect("two halves");
            branches.push(b.forward(ctx, last)?);
        }
        let cat = ctx.tape.concat(&branches, 1)?;
        self.cv2.forward(ctx, cat)
    }
}

pub const SPPF_POOL: usize = 5;

/// CBS, three chained 5x5 max pools, concat of the four maps, CBS.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: Cbs,
    pub cv2: Cbs,
}

impl Sppf {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let hidden = (c_in / 2).max(1);
        Ok(Self {
            cv1: Cbs::new(store, rng, &format!("{name}.cv1"), c_in, hidden, 1, 1)?,
            cv2: Cbs::new(store, rng, &format!("{name}.cv2"), 4 * hidden, c_out, 1, 1)?,
        })
    }

    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y0 = self.cv1.forward(ctx, x)?;
        let y1 = ctx.tape.maxpool2d(y0, SPPF_POOL, 1, SPPF_POOL / 2)?;
        let y2 = ctx.tape.maxpool2d(y1, SPPF_POOL, 1, SPPF_POOL / 2)?;
        let y3 = ctx.tape.maxpool2d(y2, SPPF_POOL, 1, SPPF_POOL / 2)?;
        let cat = ctx.tape.concat(&[y0, y1, y2, y3], 1)?;
        self.cv2.forward(ctx, cat)
    }
}

/// Attention block following a neck C2f.
#[derive(Clone, Debug)]
pub struct Attention {
    pub variant: AttentionVariant,
    pub mlp_w1: ParamId,
    pub mlp_w2: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        variant: AttentionVariant,
    ) -> Result<Self> {
        let p = CbamParams::<T>::init(channels, attention::reduction_for(channels), false, rng)
            .map_err(|e| Error::InvalidSpec(format!("{name}: {e}")))?;
        Ok(Self {
            variant,
            mlp_w1: store.add(format!("{name}.mlp_w1"), ParamKind::Decay, p.channel.mlp_w1)?,
            mlp_w2: store.add(format!("{name}.mlp_w2"), ParamKind::Decay, p.channel.mlp_w2)?,
            conv_w: store.add(format!("{name}.conv_w"), ParamKind::Decay, p.spatial.conv_weight)?,
            conv_b: store.add(
                format!("{name}.conv_b"),
                ParamKind::NoDecay,
                p.spatial.bias.expect("spatial bias"),
            )?,
        })
    }

    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let vars = CbamVars {
            mlp_w1: ctx.param(self.mlp_w1),
            mlp_w2: ctx.param(self.mlp_w2),
            mlp_b1: None,
            mlp_b2: None,
            conv_w: ctx.param(self.conv_w),
            conv_b: Some(ctx.param(self.conv_b)),
        };
        attention::apply_variant(ctx.tape, x, &vars, self.variant)
    }

    /// Copies this block's parameters out of `store`.
    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> CbamParams<T> {
        let mut p = CbamParams::zeros(store.get(self.mlp_w1).shape()[1], 1, false).expect("c divisible by 1");
        p.channel.mlp_w1 = store.get(self.mlp_w1).clone();
        p.channel.mlp_w2 = store.get(self.mlp_w2).clone();
        p.spatial.conv_weight = store.get(self.conv_w).clone();
        p.spatial.bias = Some(store.get(self.conv_b).clone());
        p
    }
}

/// One scale of the decoupled head: box-distribution and class branches.
#[derive(Clone, Debug)]
pub struct HeadScale {
    pub reg: [Cbs; 2],
    pub reg_out_w: ParamId,
    pub reg_out_b: ParamId,
    pub cls: [Cbs; 2],
    pub cls_out_w: ParamId,
    pub cls_out_b: ParamId,
}

impl HeadScale {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_reg: usize,
        c_cls: usize,
        reg_out: usize,
        num_classes: usize,
        cls_prior: f64,
    ) -> Result<Self> {
        let reg = [
            Cbs::new(store, rng, &format!("{name}.reg.0"), c_in, c_reg, 3, 1)?,
            Cbs::new(store, rng, &format!("{name}.reg.1"), c_reg, c_reg, 3, 1)?,
        ];
        let reg_out_w = store.add_uniform(
            format!("{name}.reg.out.weight"),
            ParamKind::Decay,
            vec![reg_out, c_reg, 1, 1],
            c_reg,
            rng,
        )?;
        let reg_out_b = store.add(format!("{name}.reg.out.bias"), ParamKind::NoDecay, Tensor::zeros(vec![reg_out]))?;
        let cls = [
            Cbs::new(store, rng, &format!("{name}.cls.0"), c_in, c_cls, 3, 1)?,
            Cbs::new(store, rng, &format!("{name}.cls.1"), c_cls, c_cls, 3, 1)?,
        ];
        let cls_out_w = store.add_uniform(
            format!("{name}.cls.out.weight"),
            ParamKind::Decay,
            vec![num_classes, c_cls, 1, 1],
            c_cls,
            rng,
        )?;
        let bias = -((1.0 - cls_prior) / cls_prior).ln();
        let cls_out_b = store.add(
            format!("{name}.cls.out.bias"),
            ParamKind::NoDecay,
            Tensor::full(vec![num_classes], T::lit(bias)),
        )?;
        Ok(Self {
            reg,
            reg_out_w,
            reg_out_b,
            cls,
            cls_out_w,
            cls_out_b,
        })
    }

    /// Returns `(cls_logits, reg_logits)`.
    pub(crate) fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let r = self.reg[0].forward(ctx, x)?;
        let r = self.reg[1].forward(ctx, r)?;
        let (w, b) = (ctx.param(self.reg_out_w), ctx.param(self.reg_out_b));
        let reg = ctx.tape.conv2d(r, w, Some(b), 1, 0)?;
        let c = self.cls[0].forward(ctx, x)?;
        let c = self.cls[1].forward(ctx, c)?;
        let (w, b) = (ctx.param(self.cls_out_w), ctx.param(self.cls_out_b));
        let cls = ctx.tape.conv2d(c, w, Some(b), 1, 0)?;
        Ok((cls, reg))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::CheckResult;
    use crate::tensor::{PoolKind, Tape};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
    }

    fn eval<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
    where
        F: FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, store, false, 1e-3, false);
        let y = f(&mut ctx, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn cbs_with_identity_bn_is_silu_of_conv() {
        let mut store = ParamStore::<f64>::new();
        let cbs = Cbs::new(&mut store, &mut rng(0), "b", 3, 4, 3, 2).unwrap();
        let x = input([2, 3, 6, 6], 1);
        let y = eval(&store, &x, |ctx, v| cbs.forward(ctx, v));
        assert_eq!(y.shape(), [2, 4, 3, 3]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(store.get(cbs.conv).clone()));
        let conv = tape.conv2d(xv, wv, None, 2, 1).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-3).sqrt();
        for (a, &c) in y.data().iter().zip(tape.value(conv).data()) {
            let z = c * scale;
            assert!((a - z / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn c2f_shapes_and_odd_split() {
        let mut store = ParamStore::<f64>::new();
        for n in 0..3 {
            let c2f = C2f::new(&mut store, &mut rng(n as u64), &format!("c{n}"), 6, 8, n, true).unwrap();
            let y = eval(&store, &input([1, 6, 5, 7], 2), |ctx, v| c2f.forward(ctx, v));
            assert_eq!(y.shape(), [1, 8, 5, 7]);
        }
        assert!(C2f::new(&mut store, &mut rng(0), "odd", 4, 7, 1, true).is_err());
    }

    #[test]
    fn zero_bottleneck_is_identity_with_shortcut() {
        let mut store = ParamStore::<f64>::new();
        let b = Bottleneck::new(&mut store, &mut rng(3), "m", 4, true).unwrap();
        for id in [b.cv1.conv, b.cv2.conv] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let x = input([1, 4, 3, 3], 4);
        assert_eq!(eval(&store, &x, |ctx, v| b.forward(ctx, v)), x);
    }

    #[test]
    fn c2f_without_bottlenecks_matches_composition() {
        let mut store = ParamStore::<f64>::new();
        let c2f = C2f::new(&mut store, &mut rng(5), "c", 4, 6, 0, false).unwrap();
        let x = input([2, 4, 3, 3], 6);
        let y = eval(&store, &x, |ctx, v| c2f.forward(ctx, v));
        let z = eval(&store, &x, |ctx, v| {
            let a = c2f.cv1.forward(ctx, v)?;
            let l = ctx.tape.slice(a, 1, 0, 3)?;
            let r = ctx.tape.slice(a, 1, 3, 3)?;
            let cat = ctx.tape.concat(&[l, r], 1)?;
            c2f.cv2.forward(ctx, cat)
        });
        assert_eq!(y, z);
    }

    #[test]
    fn sppf_shape_and_constant_plane() {
        let mut store = ParamStore::<f64>::new();
        let s = Sppf::new(&mut store, &mut rng(7), "s", 8, 8).unwrap();
        let y = eval(&store, &input([1, 8, 6, 5], 8), |ctx, v| s.forward(ctx, v));
        assert_eq!(y.shape(), [1, 8, 6, 5]);
        let x = Tensor::full(vec![1, 8, 4, 4], 0.7);
        let cat = eval(&store, &x, |ctx, v| {
            let y0 = s.cv1.forward(ctx, v)?;
            let y1 = ctx.tape.maxpool2d(y0, 5, 1, 2)?;
            let y2 = ctx.tape.maxpool2d(y1, 5, 1, 2)?;
            let y3 = ctx.tape.maxpool2d(y2, 5, 1, 2)?;
            ctx.tape.concat(&[y0, y1, y2, y3], 1)
        });
        let d = cat.data();
        let plane = 16 * 4;
        for k in 1..4 {
            assert_eq!(&d[..plane], &d[k * plane..(k + 1) * plane]);
        }
    }

    // Independent SPPF reference with a hand-written 5x5 pool.
    #[test]
    fn sppf_matches_compositional_oracle() {
        let mut store = ParamStore::<f64>::new();
        let s = Sppf::new(&mut store, &mut rng(9), "s", 4, 6).unwrap();
        let x = input([1, 4, 5, 6], 10);
        let y = eval(&store, &x, |ctx, v| s.forward(ctx, v));
        let pool = |t: &Tensor<f64>| {
            let (n, c, h, w) = t.dims4().unwrap();
            Tensor::from_fn(vec![n, c, h, w], |i| {
                let (yy, xx, base) = ((i / w) % h, i % w, i - i % (h * w));
                let mut m = f64::NEG_INFINITY;
                for dy in yy.saturating_sub(2)..(yy + 3).min(h) {
                    for dx in xx.saturating_sub(2)..(xx + 3).min(w) {
                        m = m.max(t.data()[base + dy * w + dx]);
                    }
                }
                m
            })
        };
        let y0 = eval(&store, &x, |ctx, v| s.cv1.forward(ctx, v));
        let y1 = pool(&y0);
        let y2 = pool(&y1);
        let y3 = pool(&y2);
        let cat: Vec<f64> = [&y0, &y1, &y2, &y3].iter().flat_map(|t| t.data().iter().copied()).collect();
        let cat = Tensor::new(vec![1, 8, 5, 6], cat).unwrap();
        let z = eval(&store, &cat, |ctx, v| s.cv2.forward(ctx, v));
        assert!(y.max_abs_diff(&z) < 1e-14);
    }

    #[test]
    fn cbs_gradient_train_mode() {
        let mut total = CheckResult::new("cbs", 1e-3);
        for draw in 0..5 {
            let mut store = ParamStore::<f64>::new();
            let cbs = Cbs::new(&mut store, &mut rng(20 + draw), "b", 2, 3, 3, 1).unwrap();
            let inputs = vec![
                input([2, 2, 4, 4], 30 + draw),
                store.get(cbs.conv).clone(),
                Tensor::uniform(vec![3], 0.5, 1.5, &mut rng(draw)),
                Tensor::uniform(vec![3], -0.5, 0.5, &mut rng(draw + 1)),
            ];
            let r = crate::gradcheck::check_tape(
                "cbs",
                &inputs,
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], None, 1, 1)?;
                    let (y, _) = tape.batchnorm2d(y, v[2], v[3], NormMode::Train { eps: 1e-3 })?;
                    let y = tape.silu(y);
                    let p = tape.pool_global(y, PoolKind::Max)?;
                    let y = tape.mul_channel(y, p)?;
                    Ok(tape.sum(y))
                },
                None,
                1e-3,
            )
            .unwrap();
            total.absorb(&r);
        }
        assert!(total.passed(), "{}", total.max_rel_err);
    }
}
