use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::AttentionVariant;
use crate::data::AugmentRanges;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::ApMethod;
use crate::model::Scale;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Only `sgd` is supported.
    pub optimizer: String,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    pub attention: AttentionVariant,
    pub scale: Scale,
    pub num_classes: usize,
    pub loss_cls: f64,
    pub loss_dfl: f64,
    pub loss_ciou: f64,
    pub augment: bool,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Evaluate on the validation set every this many epochs (and after the last).
    pub eval_every: usize,
    pub ap_method: ApMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-input nano model that trains on a CPU.
    pub fn desk() -> Self {
        let aug = AugmentRanges::default();
        let w = LossWeights::default();
        Self {
            optimizer: "sgd".into(),
            lr0: 1e-2,
            lrf: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: 16,
            input_size: 64,
            seed: 0,
            attention: AttentionVariant::ResCbam,
            scale: Scale::Nano,
            num_classes: crate::data::DEFAULT_NUM_CLASSES,
            loss_cls: w.cls,
            loss_dfl: w.dfl,
            loss_ciou: w.ciou,
            augment: true,
            alpha_min: aug.alpha.0,
            alpha_max: aug.alpha.1,
            beta_min: aug.beta.0,
            beta_max: aug.beta.1,
            eval_every: 1,
            ap_method: ApMethod::Coco101,
        }
    }

    /// The published full-scale setting: 640 px input, 100 epochs, batch 16.
    pub fn paper() -> Self {
        Self {
            input_size: 640,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk | paper)"))),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.loss_cls,
            dfl: self.loss_dfl,
            ciou: self.loss_ciou,
        }
    }

    pub fn augment_ranges(&self) -> AugmentRanges {
        if self.augment {
            AugmentRanges {
                alpha: (self.alpha_min, self.alpha_max),
                beta: (self.beta_min, self.beta_max),
            }
        } else {
            AugmentRanges::off()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.optimizer != "sgd" {
            return bad("optimizer must be sgd");
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lrf", self.lrf),
            ("loss_cls", self.loss_cls),
            ("loss_dfl", self.loss_dfl),
            ("loss_ciou", self.loss_ciou),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.num_classes == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size, num_classes and eval_every must be positive");
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(&format!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        self.augment_ranges().validate()
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "optimizer" => self.optimizer = value.to_string(),
            "lr0" => self.lr0 = parse(key, value)?,
            "lrf" => self.lrf = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "attention" => self.attention = value.parse()?,
            "scale" => self.scale = value.parse()?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "loss_cls" => self.loss_cls = parse(key, value)?,
            "loss_dfl" => self.loss_dfl = parse(key, value)?,
            "loss_ciou" => self.loss_ciou = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "alpha_min" => self.alpha_min = parse(key, value)?,
            "alpha_max" => self.alpha_max = parse(key, value)?,
            "beta_min" => self.beta_min = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "ap_method" => self.ap_method = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::desk(), text)
    }

    /// Applies `text` on top of `base`. A `preset = name` line resets to the preset.
    pub fn parse_onto(mut base: Self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let res = if k == "preset" {
                Self::preset(v).map(|p| base = p)
            } else {
                base.set(k, v)
            };
            res.map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(base)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("optimizer", &self.optimizer);
        kv("lr0", &self.lr0);
        kv("lrf", &self.lrf);
        kv("momentum", &self.momentum);
        kv("weight_decay", &self.weight_decay);
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("input_size", &self.input_size);
        kv("seed", &self.seed);
        kv("attention", &self.attention);
        kv("scale", &self.scale);
        kv("num_classes", &self.num_classes);
        kv("loss_cls", &self.loss_cls);
        kv("loss_dfl", &self.loss_dfl);
        kv("loss_ciou", &self.loss_ciou);
        kv("augment", &self.augment);
        kv("alpha_min", &self.alpha_min);
        kv("alpha_max", &self.alpha_max);
        kv("beta_min", &self.beta_min);
        kv("beta_max", &self.beta_max);
        kv("eval_every", &self.eval_every);
        kv("ap_method", &self.ap_method);
        s
    }
}
