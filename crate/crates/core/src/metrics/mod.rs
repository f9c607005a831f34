//! COCO-style detection metrics: greedy IoU matching, interpolated AP,
//! mAP over IoU thresholds 0.50:0.05:0.95 and the best pooled F1.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::boxes::DetBox;
use crate::error::{Error, Result};

#[cfg(test)]
mod tests;

pub const NUM_IOU_THRESHOLDS: usize = 10;

/// `0.50, 0.55, ..., 0.95`
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &DetBox, b: &DetBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(a.iou_unchecked(b))
}

/// Prediction order by descending confidence; equal confidences keep input order.
fn confidence_order(preds: &[DetBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// TP flags (aligned with `preds`) for one image and one class. Predictions
/// are visited by descending confidence and each takes the highest-IoU
/// unmatched ground truth with IoU >= `threshold` (lowest index on ties).
pub fn match_detections(preds: &[DetBox], gts: &[DetBox], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for i in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = preds[i].iou_unchecked(g);
            if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApMethod {
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Coco101,
    /// Exact area under the precision envelope.
    AllPoint,
}

impl FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "101-point" | "coco" => Ok(Self::Coco101),
            "all-point" => Ok(Self::AllPoint),
            other => Err(Error::Config(format!("unknown AP method {other:?} (101-point | all-point)"))),
        }
    }
}

impl std::fmt::Display for ApMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Coco101 => "101-point",
            Self::AllPoint => "all-point",
        })
    }
}

/// Cumulative `(recall, precision)` after each prediction, by descending
/// confidence (stable). Recall is 0 throughout when `n_gt == 0`.
pub fn pr_points(scored: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut tp = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            tp += scored[i].1 as usize;
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// AP of confidence-scored TP flags against `n_gt` ground truths. `None`
/// means the class has neither ground truth nor predictions.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize, method: ApMethod) -> Option<f64> {
    if n_gt == 0 {
        return if scored.is_empty() { None } else { Some(0.0) };
    }
    let pts = pr_points(scored, n_gt);
    // Precision envelope: max precision at any recall >= this point's recall.
    let mut env: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    Some(match method {
        ApMethod::Coco101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                while k < pts.len() && pts[k].0 < r {
                    k += 1;
                }
                if k < pts.len() {
                    sum += env[k];
                }
            }
            sum / 101.0
        }
        ApMethod::AllPoint => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for (p, e) in pts.iter().zip(&env) {
                area += (p.0 - prev) * e;
                prev = p.0;
            }
            area
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub num_classes: usize,
    pub method: ApMethod,
    /// `ap[class][threshold]`; `None` for classes without ground truth or predictions.
    pub ap: Vec<[Option<f64>; NUM_IOU_THRESHOLDS]>,
    pub gt_per_class: Vec<usize>,
    pub map50: f64,
    pub map5095: f64,
    pub f1: f64,
    /// Confidence at which `f1` is reached (0 when there are no predictions).
    pub f1_confidence: f64,
    pub precision: f64,
    pub recall: f64,
    /// Per class at IoU 0.5.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// True positives at IoU 0.5.
    pub num_matched: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores detections against ground truth, image by image. Classes enter
/// the means only when they have at least one ground-truth box.
pub fn evaluate(
    preds: &[Vec<DetBox>],
    gts: &[Vec<DetBox>],
    num_classes: usize,
    method: ApMethod,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    for b in preds.iter().chain(gts).flatten() {
        if b.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} out of range for {num_classes} classes",
                b.class_id
            )));
        }
        if !b.confidence.is_finite() {
            return Err(Error::InvalidArgument("non-finite confidence".into()));
        }
    }
    let thresholds = iou_thresholds();
    let mut scored = vec![vec![Vec::<(f64, bool)>::new(); NUM_IOU_THRESHOLDS]; num_classes];
    let mut gt_per_class = vec![0usize; num_classes];
    for (p_img, g_img) in preds.iter().zip(gts) {
        for c in 0..num_classes {
            let p: Vec<DetBox> = p_img.iter().filter(|b| b.class_id == c).copied().collect();
            let g: Vec<DetBox> = g_img.iter().filter(|b| b.class_id == c).copied().collect();
            gt_per_class[c] += g.len();
            for (t, &thr) in thresholds.iter().enumerate() {
                let flags = match_detections(&p, &g, thr);
                scored[c][t].extend(p.iter().zip(flags).map(|(b, f)| (b.confidence, f)));
            }
        }
    }

    let ap: Vec<[Option<f64>; NUM_IOU_THRESHOLDS]> = (0..num_classes)
        .map(|c| std::array::from_fn(|t| average_precision(&scored[c][t], gt_per_class[c], method)))
        .collect();
    let with_gt = || (0..num_classes).filter(|&c| gt_per_class[c] > 0);
    let map50 = mean(with_gt().map(|c| ap[c][0].unwrap_or(0.0)));
    let map5095 = mean(with_gt().map(|c| mean(ap[c].iter().map(|a| a.unwrap_or(0.0)))));
    let pr_curves = (0..num_classes)
        .map(|c| pr_points(&scored[c][0], gt_per_class[c]))
        .collect();

    // Best F1 over confidence cut-offs, pooled over classes at IoU 0.5.
    let num_gt: usize = gt_per_class.iter().sum();
    let mut pooled: Vec<(f64, bool)> = scored.iter().flat_map(|s| s[0].iter().copied()).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let num_matched = pooled.iter().filter(|p| p.1).count();
    let (mut f1, mut f1_confidence, mut precision, mut recall) = (0.0, 0.0, 0.0, 0.0);
    let mut tp = 0usize;
    for (k, &(conf, hit)) in pooled.iter().enumerate() {
        tp += hit as usize;
        // Only cut between distinct confidences.
        if pooled.get(k + 1).is_some_and(|next| next.0 == conf) {
            continue;
        }
        let p = tp as f64 / (k + 1) as f64;
        let r = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f > f1 {
            (f1, f1_confidence, precision, recall) = (f, conf, p, r);
        }
    }

    Ok(EvalReport {
        num_classes,
        method,
        ap,
        gt_per_class,
        map50,
        map5095,
        f1,
        f1_confidence,
        precision,
        recall,
        pr_curves,
        num_gt,
        num_predictions: pooled.len(),
        num_matched,
    })
}

fn class_label(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| c.to_string())
}

impl EvalReport {
    pub fn ap50(&self, class: usize) -> Option<f64> {
        self.ap.get(class).and_then(|a| a[0])
    }

    pub fn ap5095(&self, class: usize) -> Option<f64> {
        let a = self.ap.get(class)?;
        a[0]?;
        Some(mean(a.iter().map(|v| v.unwrap_or(0.0))))
    }

    /// `class,recall,precision` rows at IoU 0.5, six decimals.
    pub fn pr_curve_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,recall,precision\n");
        for (c, curve) in self.pr_curves.iter().enumerate() {
            let label = class_label(names, c);
            for (r, p) in curve {
                let _ = writeln!(s, "{label},{r:.6},{p:.6}");
            }
        }
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ap_method = {}", self.method);
        for (k, v) in [
            ("map50", self.map50),
            ("map5095", self.map5095),
            ("f1", self.f1),
            ("f1_confidence", self.f1_confidence),
            ("precision", self.precision),
            ("recall", self.recall),
        ] {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        for (k, v) in [
            ("num_gt", self.num_gt),
            ("num_predictions", self.num_predictions),
            ("num_matched", self.num_matched),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for c in 0..self.num_classes {
            let fmt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "class{c}.gt = {}", self.gt_per_class[c]);
            let _ = writeln!(s, "class{c}.ap50 = {}", fmt(self.ap50(c)));
            let _ = writeln!(s, "class{c}.ap5095 = {}", fmt(self.ap5095(c)));
        }
        s
    }

    /// Human-readable per-class table.
    pub fn summary(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>9}", "class", "gt", "AP50", "AP50-95");
        for c in 0..self.num_classes {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>8} {:>9}",
                class_label(names, c),
                self.gt_per_class[c],
                fmt(self.ap50(c)),
                fmt(self.ap5095(c))
            );
        }
        let _ = writeln!(
            s,
            "mAP50 {:.4}  mAP50-95 {:.4}  F1 {:.4} (P {:.4}, R {:.4} at conf {:.3})",
            self.map50, self.map5095, self.f1, self.precision, self.recall, self.f1_confidence
        );
        s
    }
}
