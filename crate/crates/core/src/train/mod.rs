//! Training loop, evaluation helpers and the baseline-vs-attention ablation.

mod config;
mod sgd;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use sgd::{linear_lr, Sgd};

use crate::attention::AttentionVariant;
use crate::boxes::DetBox;
use crate::data::{augment_brightness_contrast, stack_images, Sample};
use crate::error::{Error, Result};
use crate::loss::{assign_targets, grid_boxes, total_loss, AssignConfig, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, ApMethod, EvalReport};
use crate::model::{build_model, decode_boxes, DecodeConfig, Mode, Model, ModelSpec};
use crate::tensor::{Tape, Tensor};

/// Confidence floor used when collecting detections for mAP.
pub const EVAL_CONF_THRESHOLD: f64 = 0.001;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub dfl: f64,
    pub ciou: f64,
    pub total: f64,
    pub val_map50: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch {:>4}  lr {:.6}  bce {:.6}  dfl {:.6}  ciou {:.6}  total {:.6}",
            self.epoch, self.lr, self.bce, self.dfl, self.ciou, self.total
        );
        if let Some(m) = self.val_map50 {
            let _ = write!(s, "  val_map50 {m:.6}");
        }
        s
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub last: Model<f32>,
    pub best: Model<f32>,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub best_map50: Option<f64>,
    pub batch_size: usize,
    pub log: Vec<EpochLog>,
}

pub fn check_classes(samples: &[Sample], num_classes: usize) -> Result<()> {
    for s in samples {
        if let Some(b) = s.boxes.iter().find(|b| b.class_id >= num_classes) {
            return Err(Error::Data(format!(
                "sample {} has class {} but the model has {num_classes} classes",
                s.id, b.class_id
            )));
        }
    }
    Ok(())
}

fn fit_to(samples: &[Sample], size: usize) -> Result<Vec<Sample>> {
    samples.iter().map(|s| s.resized(size)).collect()
}

/// One optimizer step on a batch; returns the loss terms before the update.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Sgd<f32>,
    images: &Tensor<f32>,
    gts: &[Vec<DetBox>],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossBreakdown> {
    let spec = model.spec().clone();
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = model.forward(&mut tape, x, Mode::Train)?;
    let raw = pass.raw(&tape);
    let targets = assign_targets(&grid_boxes(&raw, &spec)?, gts, &spec, &AssignConfig::default())?;
    let (loss, parts) = total_loss(&mut tape, &pass.scales, &targets, &spec, weights)?;
    if !parts.total.is_finite() {
        return Err(Error::InvalidArgument(format!("loss diverged: {parts:?}")));
    }
    tape.backward(loss)?;
    let grads: Vec<_> = pass
        .params
        .iter()
        .filter_map(|&(id, v)| tape.grad(v).map(|g| (id, g)))
        .collect();
    opt.step(model.store_mut(), &grads, lr)?;
    Ok(parts)
}

/// Trains from scratch. `val` picks the best weights by mAP50; with an empty
/// `val` the best weights are the last ones. `on_epoch` sees every log entry.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val: &[Sample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_from(cfg, None, train_set, val, on_epoch)
}

/// The model spec a config describes.
pub fn spec_for(cfg: &TrainConfig) -> ModelSpec {
    ModelSpec::new(cfg.num_classes, cfg.attention, cfg.scale, cfg.input_size)
}

/// Like [`train`], optionally starting from `init`, whose spec must match the config.
pub fn train_from(
    cfg: &TrainConfig,
    init: Option<Model<f32>>,
    train_set: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = spec_for(cfg);
    if let Some(m) = &init {
        if m.spec() != &spec {
            return Err(Error::Weights(format!(
                "initial weights were built for {:?}, the config asks for {:?}",
                m.spec(),
                spec
            )));
        }
    }
    if train_set.is_empty() {
        return Err(Error::Data("no samples in the training set".into()));
    }
    check_classes(train_set, cfg.num_classes)?;
    check_classes(val, cfg.num_classes)?;
    let size = cfg.input_size;
    let train_set = fit_to(train_set, size)?;
    let val = fit_to(val, size)?;

    let mut model = match init {
        Some(m) => m,
        None => build_model::<f32>(&spec, cfg.seed)?,
    };
    let batch = cfg.batch_size.min(train_set.len());
    if batch < cfg.batch_size {
        log::info!(
            "batch size reduced from {} to {batch} for {} training images",
            cfg.batch_size,
            train_set.len()
        );
    }
    let weights = cfg.loss_weights();
    let ranges = cfg.augment_ranges();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model<f32>, usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = linear_lr(cfg.lr0, cfg.lrf, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(batch) {
            let mut imgs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (a, b) = ranges.sample(&mut rng);
                imgs.push(augment_brightness_contrast(&train_set[i].image, a, b)?);
            }
            let images = stack_images(&imgs, size)?;
            let gts: Vec<Vec<DetBox>> = chunk.iter().map(|&i| train_set[i].gt_boxes(size)).collect();
            let parts = train_step(&mut model, &mut opt, &images, &gts, &weights, lr)?;
            let k = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.bce, parts.dfl, parts.ciou, parts.total]) {
                *s += v * k;
            }
        }
        let n = train_set.len() as f64;
        let last_epoch = epoch + 1 == cfg.epochs;
        let val_map50 = if !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let m = evaluate_model(&model, &val, cfg.ap_method)?.report.map50;
            if best.as_ref().map_or(true, |b| m > b.2) {
                best = Some((model.clone(), epoch + 1, m));
            }
            Some(m)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            bce: sums[0] / n,
            dfl: sums[1] / n,
            ciou: sums[2] / n,
            total: sums[3] / n,
            val_map50,
        };
        log::debug!("epoch {} took {:.2}s", epoch + 1, started.elapsed().as_secs_f64());
        on_epoch(&entry);
        log.push(entry);
    }

    let (best, best_epoch, best_map50) = match best {
        Some((m, e, v)) => (m, e, Some(v)),
        None => (model.clone(), cfg.epochs, None),
    };
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        best_map50,
        batch_size: batch,
        log,
    })
}

/// Detections for every sample plus the mean wall-clock milliseconds per
/// image of forward pass and decoding.
pub fn predict_samples(model: &Model<f32>, samples: &[Sample], cfg: &DecodeConfig) -> Result<(Vec<Vec<DetBox>>, f64)> {
    let size = model.spec().input_size;
    let mut out = Vec::with_capacity(samples.len());
    let mut elapsed = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let fitted = fit_to(chunk, size)?;
        let images = stack_images(fitted.iter().map(|s| &s.image), size)?;
        let t = Instant::now();
        let raw = model.predict_raw(&images)?;
        out.extend(decode_boxes(&raw, model.spec(), cfg)?);
        elapsed += t.elapsed().as_secs_f64();
    }
    let ms = if samples.is_empty() {
        0.0
    } else {
        1000.0 * elapsed / samples.len() as f64
    };
    Ok((out, ms))
}

pub struct EvalRun {
    pub report: EvalReport,
    pub inference_ms: f64,
}

pub fn evaluate_model(model: &Model<f32>, samples: &[Sample], method: ApMethod) -> Result<EvalRun> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let nc = model.spec().num_classes;
    check_classes(samples, nc)?;
    let cfg = DecodeConfig {
        conf_threshold: EVAL_CONF_THRESHOLD,
        ..DecodeConfig::default()
    };
    let (preds, inference_ms) = predict_samples(model, samples, &cfg)?;
    let size = model.spec().input_size;
    let gts: Vec<Vec<DetBox>> = samples.iter().map(|s| s.gt_boxes(size)).collect();
    Ok(EvalRun {
        report: evaluate(&preds, &gts, nc, method)?,
        inference_ms,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub attention: AttentionVariant,
    pub input_size: usize,
    pub params: usize,
    pub flops: u64,
    pub f1: f64,
    pub map50: f64,
    pub map5095: f64,
    pub inference_ms: f64,
}

/// Trains and evaluates every (input size, attention variant) pair from `base`.
pub fn run_ablation(
    base: &TrainConfig,
    sizes: &[usize],
    variants: &[AttentionVariant],
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &attention in variants {
            let cfg = TrainConfig {
                input_size: size,
                attention,
                ..base.clone()
            };
            log::info!("ablation: {attention} at {size}px");
            let out = train(&cfg, train_set, &[], |e| log::debug!("{}", e.line()))?;
            let run = evaluate_model(&out.last, test_set, cfg.ap_method)?;
            rows.push(AblationRow {
                attention,
                input_size: size,
                params: out.last.num_params(),
                flops: out.last.flops()?,
                f1: run.report.f1,
                map50: run.report.map50,
                map5095: run.report.map5095,
                inference_ms: run.inference_ms,
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "model,input,params,flops,f1,map50,map5095,inference_ms";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3}",
            r.attention, r.input_size, r.params, r.flops, r.f1, r.map50, r.map5095, r.inference_ms
        );
    }
    s
}
