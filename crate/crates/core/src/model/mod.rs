//! Backbone, FPN/PAN neck with optional attention, and the anchor-free decoupled head.

mod blocks;
mod decode;
mod params;
mod weights;

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{Attention, Bottleneck, C2f, Cbs, HeadScale, Sppf, SPPF_POOL};
pub use decode::{decode_boxes, decode_distances, nms, DecodeConfig, DetBox};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use weights::{
    assign_weights, load_weights, read_weights, save_weights, write_weights, RawEntry, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

pub(crate) use params::Ctx;
use params::BnUpdate;

use crate::attention::{AttentionVariant, CbamParams};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const BASE_DEPTHS: [usize; 4] = [1, 2, 2, 1];
pub const NECK_DEPTH: usize = 1;
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Prior probability behind the classification bias initialization.
pub const CLS_PRIOR: f64 = 0.01;

/// Named width/depth multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Nano,
    Small,
    Medium,
    Large,
}

impl Scale {
    pub fn multipliers(self) -> (f64, f64) {
        match self {
            Scale::Nano => (0.25, 1.0 / 3.0),
            Scale::Small => (0.5, 1.0 / 3.0),
            Scale::Medium => (0.75, 2.0 / 3.0),
            Scale::Large => (1.0, 1.0),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Nano => "nano",
            Scale::Small => "small",
            Scale::Medium => "medium",
            Scale::Large => "large",
        })
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" | "nano" => Ok(Scale::Nano),
            "s" | "small" => Ok(Scale::Small),
            "m" | "medium" => Ok(Scale::Medium),
            "l" | "large" => Ok(Scale::Large),
            other => Err(Error::InvalidArgument(format!("unknown model scale {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub num_classes: usize,
    pub attention: AttentionVariant,
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Number of distribution bins minus one.
    pub reg_max: usize,
    pub strides: [usize; 3],
    pub input_size: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelSpec {
    pub fn new(num_classes: usize, attention: AttentionVariant, scale: Scale, input_size: usize) -> Self {
        let (width_mult, depth_mult) = scale.multipliers();
        Self {
            num_classes,
            attention,
            width_mult,
            depth_mult,
            reg_max: 16,
            strides: STRIDES,
            input_size,
            bn_momentum: 0.03,
            bn_eps: 1e-3,
        }
    }

    /// Desk-scale preset: nano width/depth at 64x64.
    pub fn nano(num_classes: usize, attention: AttentionVariant) -> Self {
        Self::new(num_classes, attention, Scale::Nano, 64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 1 {
            return fail("num_classes must be >= 1".into());
        }
        if self.reg_max < 1 {
            return fail("reg_max must be >= 1".into());
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return fail(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.strides != STRIDES {
            return fail(format!("strides must be {STRIDES:?}, got {:?}", self.strides));
        }
        for (name, v) in [("width_mult", self.width_mult), ("depth_mult", self.depth_mult)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum));
        }
        if !(self.bn_eps > 0.0) {
            return fail(format!("bn_eps must be positive, got {}", self.bn_eps));
        }
        Ok(())
    }

    /// Stage widths, rounded up to multiples of 8.
    pub fn channels(&self) -> [usize; 5] {
        BASE_CHANNELS.map(|c| {
            let scaled = (c as f64 * self.width_mult / 8.0 - 1e-9).ceil().max(1.0) as usize;
            scaled * 8
        })
    }

    fn depth(&self, n: usize) -> usize {
        ((n as f64 * self.depth_mult - 1e-9).ceil() as usize).max(1)
    }

    pub fn backbone_depths(&self) -> [usize; 4] {
        BASE_DEPTHS.map(|n| self.depth(n))
    }

    pub fn neck_depth(&self) -> usize {
        self.depth(NECK_DEPTH)
    }

    pub fn reg_channels(&self) -> usize {
        4 * (self.reg_max + 1)
    }

    /// Grid side length of each output scale.
    pub fn grids(&self) -> [usize; 3] {
        self.strides.map(|s| self.input_size / s)
    }
}

/// Per-scale raw head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput<T> {
    pub stride: usize,
    /// `[N, num_classes, h, w]`
    pub cls: Tensor<T>,
    /// `[N, 4 * (reg_max + 1), h, w]`, sides ordered left, top, right, bottom.
    pub reg: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T> {
    pub scales: Vec<ScaleOutput<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub stride: usize,
    pub cls: Var,
    pub reg: Var,
}

/// Result of recording a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub scales: Vec<ScaleVars>,
    /// Tape leaves of the trainable parameters (empty when recorded as constants).
    pub params: Vec<(ParamId, Var)>,
    /// Output shape of every block, in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

impl ForwardPass {
    pub fn raw<T: Real>(&self, tape: &Tape<T>) -> RawPrediction<T> {
        RawPrediction {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleOutput {
                    stride: s.stride,
                    cls: tape.value(s.cls).clone(),
                    reg: tape.value(s.reg).clone(),
                })
                .collect(),
        }
    }
}

/// How batch norm and parameters behave in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, trainable parameters.
    Train,
    /// Running statistics, parameters as constants.
    Eval,
    /// Running statistics with trainable parameters (deterministic gradients).
    EvalGrad,
}

#[derive(Clone, Debug)]
struct Backbone {
    stem0: Cbs,
    stem1: Cbs,
    stage1: C2f,
    down2: Cbs,
    stage2: C2f,
    down3: Cbs,
    stage3: C2f,
    down4: Cbs,
    stage4: C2f,
    sppf: Sppf,
}

#[derive(Clone, Debug)]
struct Neck {
    c2f: [C2f; 4],
    attn: Vec<Attention>,
    down1: Cbs,
    down2: Cbs,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    store: ParamStore<T>,
    backbone: Backbone,
    neck: Neck,
    head: Vec<HeadScale>,
}

/// Builds a model with parameters drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut store = ParamStore::new();
    let s = &mut store;
    let c = spec.channels();
    let d = spec.backbone_depths();
    let nd = spec.neck_depth();

    let backbone = Backbone {
        stem0: Cbs::new(s, rng, "backbone.stem0", 3, c[0], 3, 2)?,
        stem1: Cbs::new(s, rng, "backbone.stem1", c[0], c[1], 3, 2)?,
        stage1: C2f::new(s, rng, "backbone.stage1", c[1], c[1], d[0], true)?,
        down2: Cbs::new(s, rng, "backbone.down2", c[1], c[2], 3, 2)?,
        stage2: C2f::new(s, rng, "backbone.stage2", c[2], c[2], d[1], true)?,
        down3: Cbs::new(s, rng, "backbone.down3", c[2], c[3], 3, 2)?,
        stage3: C2f::new(s, rng, "backbone.stage3", c[3], c[3], d[2], true)?,
        down4: Cbs::new(s, rng, "backbone.down4", c[3], c[4], 3, 2)?,
        stage4: C2f::new(s, rng, "backbone.stage4", c[4], c[4], d[3], true)?,
        sppf: Sppf::new(s, rng, "backbone.sppf", c[4], c[4])?,
    };

    // Output widths of the four neck stages: top-down P4, P3, then bottom-up P4, P5.
    let neck_out = [c[3], c[2], c[3], c[4]];
    let c2f = [
        C2f::new(s, rng, "neck.c2f1", c[4] + c[3], neck_out[0], nd, false)?,
        C2f::new(s, rng, "neck.c2f2", neck_out[0] + c[2], neck_out[1], nd, false)?,
        C2f::new(s, rng, "neck.c2f3", neck_out[1] + neck_out[0], neck_out[2], nd, false)?,
        C2f::new(s, rng, "neck.c2f4", neck_out[2] + c[4], neck_out[3], nd, false)?,
    ];
    let mut attn = Vec::new();
    if spec.attention != AttentionVariant::None {
        for (i, &ch) in neck_out.iter().enumerate() {
            attn.push(Attention::new(s, rng, &format!("neck.c2f{}.attn", i + 1), ch, spec.attention)?);
        }
    }
    let neck = Neck {
        c2f,
        attn,
        down1: Cbs::new(s, rng, "neck.down1", neck_out[1], neck_out[1], 3, 2)?,
        down2: Cbs::new(s, rng, "neck.down2", neck_out[2], neck_out[2], 3, 2)?,
    };

    let head_in = [neck_out[1], neck_out[2], neck_out[3]];
    let c_reg = 16usize.max(head_in[0] / 4).max(4 * spec.reg_max);
    let c_cls = head_in[0].max(spec.num_classes.min(100));
    let head = ["p3", "p4", "p5"]
        .iter()
        .zip(head_in)
        .map(|(name, ch)| {
            HeadScale::new(
                s,
                rng,
                &format!("head.{name}"),
                ch,
                c_reg,
                c_cls,
                spec.reg_channels(),
                spec.num_classes,
                CLS_PRIOR,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Model {
        spec: spec.clone(),
        store,
        backbone,
        neck,
        head,
    })
}

impl<T: Real> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable parameter count (BN running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn num_attention_blocks(&self) -> usize {
        self.neck.attn.len()
    }

    /// Parameters of the `i`-th neck attention block.
    pub fn attention_params(&self, i: usize) -> Option<CbamParams<T>> {
        self.neck.attn.get(i).map(|a| a.params(&self.store))
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            neck: self.neck.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "model_forward",
                format!("expected images [N, 3, {s}, {s}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Records a forward pass of `images` on `tape`. In [`Mode::Train`] the
    /// BN running statistics are updated after the pass.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<ForwardPass> {
        let (pass, updates) = self.record(tape, images, mode)?;
        self.apply_bn_updates(&updates);
        Ok(pass)
    }

    /// Like [`Model::forward`] but never touches the running statistics.
    pub fn forward_frozen(&self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<ForwardPass> {
        Ok(self.record(tape, images, mode)?.0)
    }

    /// Eval-mode inference on a batch of images.
    pub fn predict_raw(&self, images: &Tensor<T>) -> Result<RawPrediction<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = self.forward_frozen(&mut tape, x, Mode::Eval)?;
        Ok(pass.raw(&tape))
    }

    /// Multiply-accumulate FLOPs (x2) of one eval forward pass on one image.
    pub fn flops(&self) -> Result<u64> {
        let s = self.spec.input_size;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, s, s]));
        self.forward_frozen(&mut tape, x, Mode::Eval)?;
        Ok(tape.flops())
    }

    /// Shape of every block output for a single image, in execution order.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let s = self.spec.input_size;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, s, s]));
        Ok(self.forward_frozen(&mut tape, x, Mode::Eval)?.trace)
    }

    fn record(&self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<(ForwardPass, Vec<BnUpdate<T>>)> {
        self.check_input(tape.shape(images))?;
        let trainable = mode != Mode::Eval;
        let mut ctx = Ctx::new(tape, &self.store, mode == Mode::Train, T::lit(self.spec.bn_eps), trainable);
        let ctx = &mut ctx;
        let b = &self.backbone;

        macro_rules! step {
            ($name:expr, $block:expr, $x:expr) => {{
                let v = $block.forward(ctx, $x)?;
                ctx.record($name, v);
                v
            }};
        }

        let x = step!("backbone.stem0", b.stem0, images);
        let x = step!("backbone.stem1", b.stem1, x);
        let x = step!("backbone.stage1", b.stage1, x);
        let x = step!("backbone.down2", b.down2, x);
        let p3 = step!("backbone.stage2", b.stage2, x);
        let x = step!("backbone.down3", b.down3, p3);
        let p4 = step!("backbone.stage3", b.stage3, x);
        let x = step!("backbone.down4", b.down4, p4);
        let x = step!("backbone.stage4", b.stage4, x);
        let p5 = step!("backbone.sppf", b.sppf, x);

        let n = &self.neck;
        let stage = |ctx: &mut Ctx<'_, T>, i: usize, inputs: [Var; 2]| -> Result<Var> {
            let cat = ctx.tape.concat(&inputs, 1)?;
            let y = n.c2f[i].forward(ctx, cat)?;
            let name = format!("neck.c2f{}", i + 1);
            ctx.record(&name, y);
            match n.attn.get(i) {
                Some(a) => {
                    let y = a.forward(ctx, y)?;
                    ctx.record(&format!("{name}.out"), y);
                    Ok(y)
                }
                None => {
                    ctx.record(&format!("{name}.out"), y);
                    Ok(y)
                }
            }
        };
        let up = ctx.tape.upsample_nearest2x(p5)?;
        let t4 = stage(ctx, 0, [up, p4])?;
        let up = ctx.tape.upsample_nearest2x(t4)?;
        let o3 = stage(ctx, 1, [up, p3])?;
        let dn = step!("neck.down1", n.down1, o3);
        let o4 = stage(ctx, 2, [dn, t4])?;
        let dn = step!("neck.down2", n.down2, o4);
        let o5 = stage(ctx, 3, [dn, p5])?;

        let mut scales = Vec::with_capacity(3);
        for ((h, feat), (&stride, name)) in self
            .head
            .iter()
            .zip([o3, o4, o5])
            .zip(self.spec.strides.iter().zip(["head.p3", "head.p4", "head.p5"]))
        {
            let (cls, reg) = h.forward(ctx, feat)?;
            ctx.record(&format!("{name}.cls"), cls);
            ctx.record(&format!("{name}.reg"), reg);
            scales.push(ScaleVars { stride, cls, reg });
        }
        let pass = ForwardPass {
            scales,
            params: ctx.bound_params(),
            trace: std::mem::take(&mut ctx.trace),
        };
        Ok((pass, std::mem::take(&mut ctx.bn_updates)))
    }

    fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::lit(self.spec.bn_momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, stat) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &s) in self.store.get_mut(id).data_mut().iter_mut().zip(stat) {
                    *r = keep * *r + m * s;
                }
            }
        }
    }
}
