//! Plain-Rust backing for the browser bindings, testable on the host.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rescbam::data::{generate_synthetic_dataset, Sample, SynthConfig};
use rescbam::loss::ciou_terms;
use rescbam::metrics::{evaluate, ApMethod};
use rescbam::{DetBox, Result};

/// Side length of generated demo images.
pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageView {
    pub width: usize,
    pub height: usize,
    /// Row-major RGBA bytes.
    pub rgba: Vec<u8>,
    /// `[class, x1, y1, x2, y2]` in pixels.
    pub boxes: Vec<[f64; 5]>,
}

fn to_rgba(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let data = sample.image.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn flatten(boxes: &[DetBox]) -> Vec<[f64; 5]> {
    boxes
        .iter()
        .map(|b| {
            let [x1, y1, x2, y2] = b.corners();
            [b.class_id as f64, x1, y1, x2, y2]
        })
        .collect()
}

fn view(sample: &Sample) -> ImageView {
    ImageView {
        width: sample.width(),
        height: sample.height(),
        rgba: to_rgba(sample),
        boxes: flatten(&sample.gt_boxes(IMAGE_SIZE)),
    }
}

fn samples(n: usize, num_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    generate_synthetic_dataset(&SynthConfig::new(n, num_classes, seed))
}

pub fn synthetic_image(seed: u64, num_classes: usize) -> Result<ImageView> {
    Ok(view(&samples(1, num_classes, seed)?[0]))
}

/// `[iou, d2, c2, v, loss]` for two corner-form boxes.
pub fn ciou_breakdown(p: [f64; 4], gt: [f64; 4]) -> Result<[f64; 5]> {
    let t = ciou_terms(
        &DetBox::from_corners(p[0], p[1], p[2], p[3], 0, 1.0),
        &DetBox::from_corners(gt[0], gt[1], gt[2], gt[3], 0, 1.0),
    )?;
    Ok([t.iou, t.d2, t.c2, t.v, t.loss])
}

#[derive(Clone, Debug, PartialEq)]
pub struct JitterReport {
    pub map50: f64,
    pub map5095: f64,
    pub f1: f64,
    pub images: Vec<ImageView>,
    /// Predictions per image, `[class, x1, y1, x2, y2, confidence]`.
    pub predictions: Vec<Vec<[f64; 6]>>,
}

/// Scores simulated detections: every ground-truth box is shifted and
/// rescaled by up to `jitter` of its size, and a stray box is added to an
/// image with probability `clutter`.
pub fn jitter_eval(seed: u64, num_images: usize, num_classes: usize, jitter: f64, clutter: f64) -> Result<JitterReport> {
    let data = samples(num_images, num_classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    let jitter = jitter.clamp(0.0, 1.0);
    let clutter = clutter.clamp(0.0, 1.0);
    let size = IMAGE_SIZE as f64;
    let gts: Vec<Vec<DetBox>> = data.iter().map(|s| s.gt_boxes(IMAGE_SIZE)).collect();
    let mut preds = Vec::new();
    for g in &gts {
        let mut p: Vec<DetBox> = g
            .iter()
            .map(|b| {
                let mut r = |scale: f64| scale * jitter * rng.gen_range(-1.0..=1.0);
                DetBox::new(
                    b.cx + r(b.w),
                    b.cy + r(b.h),
                    b.w * (1.0 + r(1.0)).max(0.05),
                    b.h * (1.0 + r(1.0)).max(0.05),
                    b.class_id,
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        if rng.gen_bool(clutter) {
            let (w, h) = (rng.gen_range(6.0..20.0), rng.gen_range(6.0..20.0));
            p.push(DetBox::new(
                rng.gen_range(w / 2.0..size - w / 2.0),
                rng.gen_range(h / 2.0..size - h / 2.0),
                w,
                h,
                rng.gen_range(0..num_classes),
                rng.gen_range(0.3..1.0),
            ));
        }
        preds.push(p);
    }
    let report = evaluate(&preds, &gts, num_classes, ApMethod::Coco101)?;
    Ok(JitterReport {
        map50: report.map50,
        map5095: report.map5095,
        f1: report.f1,
        images: data.iter().map(view).collect(),
        predictions: preds
            .iter()
            .map(|p| {
                flatten(p)
                    .into_iter()
                    .zip(p)
                    .map(|(f, b)| [f[0], f[1], f[2], f[3], f[4], b.confidence])
                    .collect()
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_image_is_rgba_with_boxes_inside() {
        let v = synthetic_image(3, 2).unwrap();
        assert_eq!((v.width, v.height), (IMAGE_SIZE, IMAGE_SIZE));
        assert_eq!(v.rgba.len(), IMAGE_SIZE * IMAGE_SIZE * 4);
        assert!(v.rgba.chunks(4).all(|px| px[3] == 255));
        assert!(!v.boxes.is_empty());
        for b in &v.boxes {
            assert!(b[0] < 2.0);
            assert!(b[1] >= 0.0 && b[2] >= 0.0 && b[3] <= 64.0 + 1e-9 && b[4] <= 64.0 + 1e-9);
        }
        assert_eq!(synthetic_image(3, 2).unwrap(), v);
    }

    #[test]
    fn ciou_breakdown_values() {
        let t = ciou_breakdown([0.0, 0.0, 1.0, 1.0], [10.0, 0.0, 11.0, 1.0]).unwrap();
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 100.0).abs() < 1e-12 && (t[2] - 122.0).abs() < 1e-12);
        assert!((t[4] - (1.0 + 100.0 / 122.0)).abs() < 1e-12);
        assert!(ciou_breakdown([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn exact_predictions_score_perfectly() {
        let r = jitter_eval(5, 6, 3, 0.0, 0.0).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map5095, 1.0);
        assert_eq!(r.images.len(), 6);
        let n_pred: usize = r.predictions.iter().map(Vec::len).sum();
        let n_gt: usize = r.images.iter().map(|i| i.boxes.len()).sum();
        assert_eq!(n_pred, n_gt);
    }

    #[test]
    fn heavy_jitter_and_clutter_lower_the_score() {
        let clean = jitter_eval(5, 8, 3, 0.0, 0.0).unwrap();
        let noisy = jitter_eval(5, 8, 3, 0.6, 1.0).unwrap();
        assert!(noisy.map5095 < clean.map5095);
        assert!(noisy.predictions.iter().map(Vec::len).sum::<usize>() > clean.predictions.iter().map(Vec::len).sum::<usize>());
    }
}
