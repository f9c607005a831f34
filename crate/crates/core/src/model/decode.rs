use std::cmp::Ordering;

pub use crate::boxes::DetBox;

use super::{ModelSpec, RawPrediction};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::sigmoid;

/// Post-processing operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    /// Detections kept per image after suppression.
    pub max_det: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            iou_threshold: 0.45,
            max_det: 300,
        }
    }
}

/// Expected bin index under the softmax of `logits` (bins `0..logits.len()`).
pub fn decode_distances<T: Real>(logits: &[T]) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut z = 0.0;
    let mut e = 0.0;
    for (k, v) in logits.iter().enumerate() {
        let p = (v.as_f64() - m).exp();
        z += p;
        e += k as f64 * p;
    }
    e / z
}

fn by_confidence(a: &DetBox, b: &DetBox) -> Ordering {
    b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal)
}

/// Class-wise greedy suppression: a box is dropped when its IoU with an
/// already kept box of the same class exceeds `iou_threshold`. Output is
/// sorted by confidence, descending (stable for ties).
pub fn nms(mut boxes: Vec<DetBox>, iou_threshold: f64) -> Vec<DetBox> {
    boxes.sort_by(by_confidence);
    let mut kept: Vec<DetBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == b.class_id && k.iou_unchecked(&b) > iou_threshold);
        if !suppressed {
            kept.push(b);
        }
    }
    kept
}

/// Turns raw head outputs into per-image detections in pixel coordinates,
/// clipped to the input square.
pub fn decode_boxes<T: Real>(raw: &RawPrediction<T>, spec: &ModelSpec, cfg: &DecodeConfig) -> Result<Vec<Vec<DetBox>>> {
    let bins = spec.reg_max + 1;
    let size = spec.input_size as f64;
    let batch = raw.scales.first().map_or(0, |s| s.cls.shape()[0]);
    let mut out = vec![Vec::new(); batch];
    for scale in &raw.scales {
        let (n, nc, h, w) = scale.cls.dims4()?;
        let (rn, rc, rh, rw) = scale.reg.dims4()?;
        if n != batch || nc != spec.num_classes || (rn, rc, rh, rw) != (n, 4 * bins, h, w) {
            return Err(Error::shape(
                "decode_boxes",
                format!(
                    "inconsistent head outputs {:?} / {:?} for {} classes, {bins} bins",
                    scale.cls.shape(),
                    scale.reg.shape(),
                    spec.num_classes
                ),
            ));
        }
        let stride = scale.stride as f64;
        let plane = h * w;
        let cls = scale.cls.data();
        let reg = scale.reg.data();
        let mut side = vec![T::zero(); bins];
        for (b, dets) in out.iter_mut().enumerate() {
            for cell in 0..plane {
                let scores: Vec<(usize, f64)> = (0..nc)
                    .map(|c| (c, sigmoid(cls[(b * nc + c) * plane + cell]).as_f64()))
                    .filter(|&(_, s)| s > cfg.conf_threshold)
                    .collect();
                if scores.is_empty() {
                    continue;
                }
                let mut d = [0.0; 4];
                for (s, dist) in d.iter_mut().enumerate() {
                    for (k, v) in side.iter_mut().enumerate() {
                        *v = reg[(b * 4 * bins + s * bins + k) * plane + cell];
                    }
                    *dist = decode_distances(&side) * stride;
                }
                let ax = ((cell % w) as f64 + 0.5) * stride;
                let ay = ((cell / w) as f64 + 0.5) * stride;
                for (c, score) in scores {
                    let bx = DetBox::from_corners(ax - d[0], ay - d[1], ax + d[2], ay + d[3], c, score).clipped(size, size);
                    if !bx.is_degenerate() {
                        dets.push(bx);
                    }
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|d| {
            let mut kept = nms(d, cfg.iou_threshold);
            kept.truncate(cfg.max_det);
            kept
        })
        .collect())
}
