//! Named gradient-check suites over ops, modules and a full model.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::harness::{check_function, check_tape, CheckResult};
use crate::attention::{self, AttentionVariant, CbamParams, CbamVars};
use crate::boxes::DetBox;
use crate::error::{Error, Result};
use crate::loss::{assign_targets, grid_boxes, total_loss, AssignConfig, LossWeights};
use crate::model::{build_model, Bottleneck, C2f, Cbs, Ctx, Mode, ModelSpec, ParamStore, Sppf};
use crate::tensor::{NormMode, PoolKind, Tape, Tensor, UnaryKind, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_DRAWS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            other => Err(Error::InvalidArgument(format!("unknown scope {other:?} (expected op|module|model)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::Model => "model",
        })
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// An op-level check: random inputs of the given shapes, value reduced by a
/// random weighted sum.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    let bce_targets = Tensor::from_fn(vec![2, 3], |i| [0.0, 1.0, 0.3][i % 3]);
    vec![
        case("conv2d", &[&[2, 3, 5, 5], &[2, 3, 3, 3], &[2]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        case("conv2d_1x1", &[&[1, 4, 3, 3], &[2, 4, 1, 1]], |t, v| t.conv2d(v[0], v[1], None, 1, 0)),
        case("batchnorm2d_train", &[&[2, 3, 4, 4], &[3], &[3]], |t, v| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], NormMode::Train { eps: 1e-3 })?.0)
        }),
        case("batchnorm2d_eval", &[&[2, 3, 2, 2], &[3], &[3]], |t, v| {
            let mode = NormMode::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[1.5, 0.7, 2.0],
                eps: 1e-3,
            };
            Ok(t.batchnorm2d(v[0], v[1], v[2], mode)?.0)
        }),
        case("sigmoid", &[&[2, 3, 2, 2]], |t, v| Ok(t.sigmoid(v[0]))),
        case("silu", &[&[2, 3, 2, 2]], |t, v| Ok(t.silu(v[0]))),
        case("relu", &[&[2, 3, 2, 2]], |t, v| Ok(t.relu(v[0]))),
        case("atan", &[&[7]], |t, v| Ok(t.unary(v[0], UnaryKind::Atan))),
        case("square", &[&[7]], |t, v| Ok(t.unary(v[0], UnaryKind::Square))),
        case("neg", &[&[7]], |t, v| Ok(t.unary(v[0], UnaryKind::Neg))),
        case("add", &[&[6], &[6]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[6], &[6]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[6], &[6]], |t, v| t.mul(v[0], v[1])),
        case("div", &[&[6], &[6]], |t, v| {
            let d = t.unary(v[1], UnaryKind::Square);
            let d = t.add_scalar(d, 0.5);
            t.div(v[0], d)
        }),
        case("maximum", &[&[6], &[6]], |t, v| t.maximum(v[0], v[1])),
        case("minimum", &[&[6], &[6]], |t, v| t.minimum(v[0], v[1])),
        case("add_scalar", &[&[6]], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        case("mul_scalar", &[&[6]], |t, v| Ok(t.mul_scalar(v[0], -1.7))),
        case("mul_channel", &[&[2, 3, 2, 2], &[2, 3, 1, 1]], |t, v| t.mul_channel(v[0], v[1])),
        case("mul_spatial", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| t.mul_spatial(v[0], v[1])),
        case("pool_global_avg", &[&[2, 3, 3, 3]], |t, v| t.pool_global(v[0], PoolKind::Avg)),
        case("pool_global_max", &[&[2, 3, 3, 3]], |t, v| t.pool_global(v[0], PoolKind::Max)),
        case("pool_channel_avg", &[&[2, 3, 3, 3]], |t, v| t.pool_channel(v[0], PoolKind::Avg)),
        case("pool_channel_max", &[&[2, 3, 3, 3]], |t, v| t.pool_channel(v[0], PoolKind::Max)),
        case("maxpool2d", &[&[1, 2, 5, 5]], |t, v| t.maxpool2d(v[0], 5, 1, 2)),
        case("concat", &[&[2, 2, 2, 3], &[2, 3, 2, 3]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[2, 4, 2, 2]], |t, v| t.slice(v[0], 1, 1, 2)),
        case("reshape", &[&[2, 3, 2]], |t, v| t.reshape(v[0], &[3, 4])),
        case("upsample_nearest2x", &[&[1, 2, 2, 3]], |t, v| t.upsample_nearest2x(v[0])),
        case("linear", &[&[3, 4], &[2, 4], &[2]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("softmax", &[&[2, 5, 3]], |t, v| t.softmax(v[0], 1)),
        case("sum", &[&[5]], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[5]], |t, v| Ok(t.mean(v[0]))),
        case("gather_cells", &[&[2, 3, 2, 2]], |t, v| t.gather_cells(v[0], &[(0, 1, 0), (1, 1, 1), (0, 1, 0)])),
        case("bce_with_logits", &[&[2, 3]], move |t, v| t.bce_with_logits(v[0], &bce_targets, 0.7)),
        case("dfl_with_logits", &[&[3, 5]], |t, v| t.dfl_with_logits(v[0], &[0.0, 2.5, 3.99])),
    ]
}

fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs `draws` random draws of one case with full coordinate coverage.
pub fn run_case(c: &OpCase, seed: u64, draws: usize, tolerance: f64) -> Result<CheckResult> {
    let mut total = CheckResult::new(c.name, tolerance);
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(draw));
        let inputs: Vec<Tensor<f64>> = c
            .shapes
            .iter()
            .map(|s| Tensor::uniform(s.clone(), -1.0, 1.0, &mut rng))
            .collect();
        let r = check_tape(
            c.name,
            &inputs,
            |tape, v| {
                let y = (c.build)(tape, v)?;
                readout(tape, y, seed ^ draw)
            },
            None,
            tolerance,
        )?;
        total.absorb(&r);
    }
    Ok(total)
}

pub fn op_suite(seed: u64, draws: usize) -> Result<Vec<CheckResult>> {
    op_cases().iter().map(|c| run_case(c, seed, draws, OP_TOLERANCE)).collect()
}

/// Checks a function of a parameter store and one input tensor, with respect
/// to the input and every trainable parameter.
fn check_store<F>(name: &str, store: &ParamStore<f64>, input: &Tensor<f64>, tolerance: f64, forward: F) -> Result<CheckResult>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).kind.trainable()).collect();
    let mut flat: Vec<f64> = input.data().to_vec();
    for &id in &ids {
        flat.extend_from_slice(store.get(id).data());
    }
    let unpack = |x: &[f64]| -> Result<(ParamStore<f64>, Tensor<f64>)> {
        let mut s = store.clone();
        let mut off = input.numel();
        for &id in &ids {
            let n = s.get(id).numel();
            s.get_mut(id).data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        Ok((s, Tensor::new(input.shape().to_vec(), x[..input.numel()].to_vec())?))
    };
    let run = |s: &ParamStore<f64>, x: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<(Var, Var, Vec<(crate::model::ParamId, Var)>)> {
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::new(tape, s, true, 1e-3, true);
        let y = forward(&mut ctx, xv)?;
        let params = ctx.bound_params();
        let out = readout(tape, y, 17)?;
        Ok((xv, out, params))
    };

    let mut tape = Tape::new();
    let (xv, out, params) = run(store, input, &mut tape)?;
    tape.backward(out)?;
    let mut analytic = tape.grad(xv).map_or(vec![0.0; input.numel()], |g| g.into_data());
    for &id in &ids {
        match params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| tape.grad(*v)) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(store.get(id).numel())),
        }
    }
    let coords: Vec<usize> = (0..flat.len()).collect();
    let value = |x: &[f64]| -> f64 {
        let Ok((s, xi)) = unpack(x) else { return f64::NAN };
        let mut tape = Tape::new();
        match run(&s, &xi, &mut tape) {
            Ok((_, out, _)) => tape.value(out).data()[0],
            Err(_) => f64::NAN,
        }
    };
    Ok(check_function(name, &flat, value, &analytic, &coords, tolerance))
}

fn attention_case(variant: AttentionVariant, seed: u64, draws: usize) -> Result<CheckResult> {
    let name = match variant {
        AttentionVariant::Cbam => "cbam",
        AttentionVariant::ResCbam => "rescbam",
        AttentionVariant::None => "identity",
    };
    let mut total = CheckResult::new(name, OP_TOLERANCE);
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31 * draw));
        let p = CbamParams::<f64>::init(4, attention::reduction_for(4), false, &mut rng)?;
        let mut inputs = vec![Tensor::uniform(vec![2, 4, 4, 4], -2.0, 2.0, &mut rng)];
        inputs.extend(p.named().into_iter().map(|(_, t)| t.clone()));
        inputs.push(Tensor::uniform(vec![1], -0.5, 0.5, &mut rng));
        let r = check_tape(
            name,
            &inputs,
            |tape, v| {
                let vars = CbamVars {
                    mlp_w1: v[1],
                    mlp_w2: v[2],
                    mlp_b1: None,
                    mlp_b2: None,
                    conv_w: v[3],
                    conv_b: Some(v[5]),
                };
                let y = attention::apply_variant(tape, v[0], &vars, variant)?;
                readout(tape, y, draw)
            },
            None,
            OP_TOLERANCE,
        )?;
        total.absorb(&r);
    }
    Ok(total)
}

fn gate_case(name: &'static str, spatial: bool, seed: u64, draws: usize) -> Result<CheckResult> {
    let mut total = CheckResult::new(name, OP_TOLERANCE);
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(97 * draw));
        let p = CbamParams::<f64>::init(4, 2, true, &mut rng)?;
        let mut inputs = vec![Tensor::uniform(vec![2, 4, 3, 5], -2.0, 2.0, &mut rng)];
        inputs.extend(p.named().into_iter().map(|(_, t)| t.clone()));
        inputs.push(Tensor::uniform(vec![1], -0.5, 0.5, &mut rng));
        let r = check_tape(
            name,
            &inputs,
            |tape, v| {
                let vars = CbamVars {
                    mlp_w1: v[1],
                    mlp_w2: v[2],
                    mlp_b1: Some(v[3]),
                    mlp_b2: Some(v[4]),
                    conv_w: v[5],
                    conv_b: Some(v[7]),
                };
                let y = if spatial {
                    attention::spatial_attention(tape, v[0], &vars)?
                } else {
                    attention::channel_attention(tape, v[0], &vars)?
                };
                readout(tape, y, draw)
            },
            None,
            OP_TOLERANCE,
        )?;
        total.absorb(&r);
    }
    Ok(total)
}

fn block_case<B>(
    name: &'static str,
    draws: usize,
    seed: u64,
    input: [usize; 4],
    make: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<B>,
    forward: impl Fn(&B, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<CheckResult> {
    let mut total = CheckResult::new(name, OP_TOLERANCE);
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(131 * draw));
        let mut store = ParamStore::new();
        let block = make(&mut store, &mut rng)?;
        // Non-trivial affine parameters so BN gradients are exercised.
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name.ends_with(".bn.gamma") || store.entry(id).name.ends_with(".bn.beta") {
                let n = store.get(id).numel();
                store.set(id, Tensor::uniform(vec![n], 0.5, 1.5, &mut rng))?;
            }
        }
        let x = Tensor::uniform(input.to_vec(), -1.0, 1.0, &mut rng);
        let r = check_store(name, &store, &x, OP_TOLERANCE, |ctx, v| forward(&block, ctx, v))?;
        total.absorb(&r);
    }
    Ok(total)
}

fn loss_case(seed: u64, draws: usize) -> Result<CheckResult> {
    let mut spec = ModelSpec::nano(2, AttentionVariant::None);
    spec.reg_max = 4;
    let mut total = CheckResult::new("total_loss", MODEL_TOLERANCE);
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(211 * draw));
        let inputs: Vec<Tensor<f64>> = spec
            .grids()
            .iter()
            .flat_map(|&g| {
                [
                    Tensor::uniform(vec![1, spec.num_classes, g, g], -1.0, 1.0, &mut rng),
                    Tensor::uniform(vec![1, spec.reg_channels(), g, g], -1.0, 1.0, &mut rng),
                ]
            })
            .collect();
        let raw = crate::model::RawPrediction {
            scales: (0..3)
                .map(|i| crate::model::ScaleOutput {
                    stride: spec.strides[i],
                    cls: inputs[2 * i].clone(),
                    reg: inputs[2 * i + 1].clone(),
                })
                .collect(),
        };
        let gts = vec![vec![
            DetBox::new(22.0, 26.0, 20.0, 16.0, 0, 1.0),
            DetBox::new(44.0, 40.0, 28.0, 34.0, 1, 1.0),
        ]];
        let targets = assign_targets(&grid_boxes(&raw, &spec)?, &gts, &spec, &AssignConfig::default())?;
        let r = check_tape(
            "total_loss",
            &inputs,
            |tape, v| {
                let vars: Vec<crate::model::ScaleVars> = (0..3)
                    .map(|i| crate::model::ScaleVars {
                        stride: spec.strides[i],
                        cls: v[2 * i],
                        reg: v[2 * i + 1],
                    })
                    .collect();
                Ok(total_loss(tape, &vars, &targets, &spec, &LossWeights::default())?.0)
            },
            None,
            MODEL_TOLERANCE,
        )?;
        total.absorb(&r);
    }
    Ok(total)
}

/// Attention gates, both attention blocks, the CNN blocks and the total loss.
pub fn module_suite(seed: u64, draws: usize) -> Result<Vec<CheckResult>> {
    let block_draws = draws.min(5).max(1);
    Ok(vec![
        gate_case("channel_attention", false, seed, draws)?,
        gate_case("spatial_attention", true, seed, draws)?,
        attention_case(AttentionVariant::Cbam, seed, draws)?,
        attention_case(AttentionVariant::ResCbam, seed, draws)?,
        block_case(
            "cbs",
            block_draws,
            seed,
            [2, 3, 5, 5],
            |s, r| Cbs::new(s, r, "cbs", 3, 4, 3, 2),
            |b, ctx, x| b.forward(ctx, x),
        )?,
        block_case(
            "bottleneck",
            block_draws,
            seed,
            [2, 2, 3, 3],
            |s, r| Bottleneck::new(s, r, "m", 2, true),
            |b, ctx, x| b.forward(ctx, x),
        )?,
        block_case(
            "c2f",
            block_draws,
            seed,
            [2, 4, 3, 3],
            |s, r| C2f::new(s, r, "c2f", 4, 4, 1, true),
            |b, ctx, x| b.forward(ctx, x),
        )?,
        block_case(
            "sppf",
            block_draws,
            seed,
            [2, 4, 4, 4],
            |s, r| Sppf::new(s, r, "sppf", 4, 4),
            |b, ctx, x| b.forward(ctx, x),
        )?,
        loss_case(seed, draws.min(3).max(1))?,
    ])
}

/// Minimal model used by the end-to-end check.
pub fn tiny_spec(attention: AttentionVariant) -> ModelSpec {
    let mut spec = ModelSpec::nano(2, attention);
    spec.width_mult = 1.0 / 16.0;
    spec.reg_max = 4;
    spec
}

/// Total-loss gradient of a full model on a 64x64 batch of two images, with
/// respect to a random `fraction` of the trainable parameters. Target
/// assignment is computed once and then held fixed.
pub fn model_check(attention: AttentionVariant, seed: u64, fraction: f64) -> Result<CheckResult> {
    let spec = tiny_spec(attention);
    let model = build_model::<f64>(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let s = spec.input_size;
    let images = Tensor::uniform(vec![2, 3, s, s], 0.0, 1.0, &mut rng);
    let gts = vec![
        vec![DetBox::new(20.0, 24.0, 18.0, 22.0, 0, 1.0), DetBox::new(44.0, 40.0, 30.0, 26.0, 1, 1.0)],
        vec![DetBox::new(32.0, 30.0, 40.0, 36.0, 1, 1.0)],
    ];
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = model.forward_frozen(&mut tape, x, Mode::Train)?;
    let raw = pass.raw(&tape);
    let targets = assign_targets(&grid_boxes(&raw, &spec)?, &gts, &spec, &AssignConfig::default())?;
    let (loss, _) = total_loss(&mut tape, &pass.scales, &targets, &spec, &weights)?;
    tape.backward(loss)?;

    let store = model.store();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    let mut slots = Vec::new();
    for (id, v) in &pass.params {
        let t = store.get(*id);
        let g = tape.grad(*v).map_or(vec![0.0; t.numel()], |g| g.into_data());
        for k in 0..t.numel() {
            slots.push((*id, k));
        }
        flat.extend_from_slice(t.data());
        analytic.extend(g);
    }
    let count = ((flat.len() as f64 * fraction).ceil() as usize).clamp(1, flat.len());
    let mut coords = sample(&mut rng, flat.len(), count).into_vec();
    coords.sort_unstable();

    let value = |x: &[f64]| -> f64 {
        let mut m = model.clone();
        for &c in &coords {
            let (id, k) = slots[c];
            m.store_mut().get_mut(id).data_mut()[k] = x[c];
        }
        let mut tape = Tape::new();
        let xi = tape.constant(images.clone());
        let mut eval = || -> Result<f64> {
            let pass = m.forward_frozen(&mut tape, xi, Mode::Train)?;
            let (loss, _) = total_loss(&mut tape, &pass.scales, &targets, &spec, &weights)?;
            Ok(tape.value(loss).data()[0])
        };
        eval().unwrap_or(f64::NAN)
    };
    let name = format!("model_{attention}");
    Ok(check_function(&name, &flat, value, &analytic, &coords, MODEL_TOLERANCE))
}

/// Runs a scope: `Op` covers ops only, `Module` adds modules, `Model` adds the
/// end-to-end checks of the baseline and the residual-attention model.
pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(seed, DEFAULT_DRAWS)?;
    if scope != Scope::Op {
        out.extend(module_suite(seed, DEFAULT_DRAWS)?);
    }
    if scope == Scope::Model {
        for variant in [AttentionVariant::None, AttentionVariant::ResCbam] {
            out.push(model_check(variant, seed, 0.01)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_passes() {
        for r in op_suite(1, 3).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_rule_is_named() {
        // The recorded pass differentiates silu while the probes evaluate
        // sigmoid, as a wrong backward rule would.
        let calls = std::rc::Rc::new(std::cell::Cell::new(0));
        let seen = calls.clone();
        let bad = case("silu_corrupted", &[&[2, 3]], move |t, v| {
            seen.set(seen.get() + 1);
            Ok(if seen.get() == 1 { t.silu(v[0]) } else { t.sigmoid(v[0]) })
        });
        let r = run_case(&bad, 0, 1, OP_TOLERANCE).unwrap();
        assert!(calls.get() > 1);
        assert!(!r.passed());
        assert_eq!(r.name, "silu_corrupted");
    }
}
