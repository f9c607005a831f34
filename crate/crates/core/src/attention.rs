//! Channel/spatial attention (CBAM) and its residual variant.
//!
//! `cbam(F) = M_S(F') * F'` with `F' = M_C(F) * F`, and `rescbam(F) = F + cbam(F)`.
//! The channel gate passes global average and max descriptors through one
//! shared two-layer MLP (ReLU hidden layer); the spatial gate runs a 7x7
//! convolution over the channel-wise average and max maps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{PoolKind, Tape, Tensor, Var};

/// Default MLP reduction ratio.
pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Which attention block follows each neck C2f.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    None,
    Cbam,
    ResCbam,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::None => "none",
            AttentionVariant::Cbam => "cbam",
            AttentionVariant::ResCbam => "rescbam",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionVariant::None),
            "cbam" => Ok(AttentionVariant::Cbam),
            "rescbam" => Ok(AttentionVariant::ResCbam),
            other => Err(Error::InvalidArgument(format!(
                "unknown attention variant {other:?} (expected none|cbam|rescbam)"
            ))),
        }
    }
}

/// Effective reduction ratio for `channels`: `min(16, C)`.
pub fn reduction_for(channels: usize) -> usize {
    DEFAULT_REDUCTION.min(channels).max(1)
}

/// Shared MLP of the channel gate. `mlp_w1: [C/r, C]`, `mlp_w2: [C, C/r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams<T> {
    pub mlp_w1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b1: Option<Tensor<T>>,
    pub mlp_b2: Option<Tensor<T>>,
}

/// 7x7 convolution of the spatial gate over two pooled maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub conv_weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T> {
    pub channel: ChannelAttentionParams<T>,
    pub spatial: SpatialAttentionParams<T>,
}

impl<T: Real> CbamParams<T> {
    /// All-zero parameters: both gates evaluate to exactly 0.5.
    pub fn zeros(channels: usize, reduction: usize, mlp_bias: bool) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            channel: ChannelAttentionParams {
                mlp_w1: Tensor::zeros(vec![hidden, channels]),
                mlp_w2: Tensor::zeros(vec![channels, hidden]),
                mlp_b1: mlp_bias.then(|| Tensor::zeros(vec![hidden])),
                mlp_b2: mlp_bias.then(|| Tensor::zeros(vec![channels])),
            },
            spatial: SpatialAttentionParams {
                conv_weight: Tensor::zeros(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
                bias: Some(Tensor::zeros(vec![1])),
            },
        })
    }

    /// Fan-in uniform weights; the 7x7 bias starts at zero.
    pub fn init<R: Rng>(channels: usize, reduction: usize, mlp_bias: bool, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction, mlp_bias)?;
        let hidden = p.hidden();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        p.channel.mlp_w1 = Tensor::uniform(vec![hidden, channels], -fan(channels), fan(channels), rng);
        p.channel.mlp_w2 = Tensor::uniform(vec![channels, hidden], -fan(hidden), fan(hidden), rng);
        if mlp_bias {
            p.channel.mlp_b1 = Some(Tensor::uniform(vec![hidden], -fan(channels), fan(channels), rng));
            p.channel.mlp_b2 = Some(Tensor::uniform(vec![channels], -fan(hidden), fan(hidden), rng));
        }
        let k = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
        p.spatial.conv_weight = Tensor::uniform(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], -fan(k), fan(k), rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channel.mlp_w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.channel.mlp_w1.shape()[0]
    }

    /// Named tensors in a fixed order (used for parameter registration).
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("mlp_w1", &self.channel.mlp_w1), ("mlp_w2", &self.channel.mlp_w2)];
        if let Some(b) = &self.channel.mlp_b1 {
            v.push(("mlp_b1", b));
        }
        if let Some(b) = &self.channel.mlp_b2 {
            v.push(("mlp_b2", b));
        }
        v.push(("conv_w", &self.spatial.conv_weight));
        if let Some(b) = &self.spatial.bias {
            v.push(("conv_b", b));
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> CbamVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        CbamVars {
            mlp_w1: put(&self.channel.mlp_w1),
            mlp_w2: put(&self.channel.mlp_w2),
            mlp_b1: self.channel.mlp_b1.as_ref().map(&mut put),
            mlp_b2: self.channel.mlp_b2.as_ref().map(&mut put),
            conv_w: put(&self.spatial.conv_weight),
            conv_b: self.spatial.bias.as_ref().map(&mut put),
        }
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 || channels % reduction != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel attention: {channels} channels not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Attention parameters already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub mlp_w1: Var,
    pub mlp_w2: Var,
    pub mlp_b1: Option<Var>,
    pub mlp_b2: Option<Var>,
    pub conv_w: Var,
    pub conv_b: Option<Var>,
}

fn shared_mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &CbamVars) -> Result<Var> {
    let h = tape.linear(x, p.mlp_w1, p.mlp_b1)?;
    let h = tape.relu(h);
    tape.linear(h, p.mlp_w2, p.mlp_b2)
}

/// Channel gate `M_C(F) = sigmoid(MLP(GAP(F)) + MLP(GMP(F)))`, shape `[N,C,1,1]`.
pub fn channel_attention<T: Real>(tape: &mut Tape<T>, f: Var, p: &CbamVars) -> Result<Var> {
    let (n, c, _, _) = tape.value(f).dims4()?;
    let avg = tape.pool_global(f, PoolKind::Avg)?;
    let avg = tape.reshape(avg, &[n, c])?;
    let max = tape.pool_global(f, PoolKind::Max)?;
    let max = tape.reshape(max, &[n, c])?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let s = tape.add(a, m)?;
    let s = tape.sigmoid(s);
    tape.reshape(s, &[n, c, 1, 1])
}

/// Spatial gate `M_S(F) = sigmoid(conv7x7([avg_c(F); max_c(F)]))`, shape `[N,1,H,W]`.
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, f: Var, p: &CbamVars) -> Result<Var> {
    let ws = tape.shape(p.conv_w);
    if ws != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
        return Err(Error::shape(
            "spatial_attention",
            format!("conv weight must be [1, 2, 7, 7], got {ws:?}"),
        ));
    }
    let avg = tape.pool_channel(f, PoolKind::Avg)?;
    let max = tape.pool_channel(f, PoolKind::Max)?;
    let cat = tape.concat(&[avg, max], 1)?;
    let s = tape.conv2d(cat, p.conv_w, p.conv_b, 1, SPATIAL_KERNEL / 2)?;
    Ok(tape.sigmoid(s))
}

/// Channel refinement followed by spatial refinement.
pub fn cbam<T: Real>(tape: &mut Tape<T>, f: Var, p: &CbamVars) -> Result<Var> {
    let mc = channel_attention(tape, f, p)?;
    let refined = tape.mul_channel(f, mc)?;
    let ms = spatial_attention(tape, refined, p)?;
    tape.mul_spatial(refined, ms)
}

/// `F + cbam(F)`.
pub fn rescbam<T: Real>(tape: &mut Tape<T>, f: Var, p: &CbamVars) -> Result<Var> {
    let refined = cbam(tape, f, p)?;
    tape.add(f, refined)
}

/// Applies `variant` to `f`. `None` returns `f` unchanged.
pub fn apply_variant<T: Real>(tape: &mut Tape<T>, f: Var, p: &CbamVars, variant: AttentionVariant) -> Result<Var> {
    match variant {
        AttentionVariant::None => Ok(f),
        AttentionVariant::Cbam => cbam(tape, f, p),
        AttentionVariant::ResCbam => rescbam(tape, f, p),
    }
}

fn eval_once<T: Real>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
    op: impl FnOnce(&mut Tape<T>, Var, &CbamVars) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let vars = p.bind(&mut tape, false);
    let y = op(&mut tape, x, &vars)?;
    Ok(tape.value(y).clone())
}

pub fn channel_attention_map<T: Real>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    eval_once(f, p, channel_attention)
}

pub fn spatial_attention_map<T: Real>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    eval_once(f, p, spatial_attention)
}

pub fn cbam_apply<T: Real>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    eval_once(f, p, cbam)
}

pub fn rescbam_apply<T: Real>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    eval_once(f, p, rescbam)
}
