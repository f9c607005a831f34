use std::cmp::Ordering;

use crate::boxes::DetBox;
use crate::error::{Error, Result};
use crate::model::{decode_distances, ModelSpec, RawPrediction};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignConfig {
    /// Cells kept per ground-truth box.
    pub top_k: usize,
    /// A box fits a scale best when its longer side spans this many cells.
    pub cells_per_side: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            cells_per_side: 4.0,
        }
    }
}

/// Target of one matched cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMatch {
    /// Index of the ground-truth box within its image.
    pub gt: usize,
    pub class_id: usize,
    /// Ground-truth box in pixels.
    pub target: DetBox,
    /// Left, top, right, bottom distances in bin units, clamped to `[0, reg_max]`.
    pub dist: [f64; 4],
    /// IoU of the cell's decoded box with the target at assignment time.
    pub iou: f64,
}

impl CellMatch {
    /// `(y, y_n, y_{n+1}, w_n, w_{n+1})` of one side for `reg_max`.
    pub fn dfl_bins(&self, side: usize, reg_max: usize) -> (f64, usize, usize, f64, f64) {
        let y = self.dist[side];
        let lo = (y.floor() as usize).min(reg_max - 1);
        (y, lo, lo + 1, lo as f64 + 1.0 - y, y - lo as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub stride: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    /// Indexed `(b * h + y) * w + x`.
    pub cells: Vec<Option<CellMatch>>,
}

impl ScaleTargets {
    /// Matched cells as `((b, y, x), match)` in index order.
    pub fn matched(&self) -> impl Iterator<Item = ((usize, usize, usize), &CellMatch)> {
        let (h, w) = (self.h, self.w);
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, m)| m.as_ref().map(|m| ((i / (h * w), (i / w) % h, i % w), m)))
    }

    pub fn anchor(&self, y: usize, x: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignedTargets {
    pub scales: Vec<ScaleTargets>,
}

impl AssignedTargets {
    pub fn num_matched(&self) -> usize {
        self.scales.iter().map(|s| s.matched().count()).sum()
    }
}

/// Decoded (unclipped) box of every cell, per scale, indexed like [`ScaleTargets::cells`].
pub fn grid_boxes<T: Real>(raw: &RawPrediction<T>, spec: &ModelSpec) -> Result<Vec<Vec<DetBox>>> {
    let bins = spec.reg_max + 1;
    raw.scales
        .iter()
        .map(|s| {
            let (n, c, h, w) = s.reg.dims4()?;
            if c != 4 * bins {
                return Err(Error::shape("grid_boxes", format!("expected {} channels, got {c}", 4 * bins)));
            }
            let plane = h * w;
            let data = s.reg.data();
            let stride = s.stride as f64;
            let mut out = Vec::with_capacity(n * plane);
            let mut logits = vec![T::zero(); bins];
            for b in 0..n {
                for cell in 0..plane {
                    let mut d = [0.0; 4];
                    for (side, dist) in d.iter_mut().enumerate() {
                        for (k, v) in logits.iter_mut().enumerate() {
                            *v = data[((b * 4 + side) * bins + k) * plane + cell];
                        }
                        *dist = decode_distances(&logits) * stride;
                    }
                    let ax = ((cell % w) as f64 + 0.5) * stride;
                    let ay = ((cell / w) as f64 + 0.5) * stride;
                    out.push(DetBox::from_corners(ax - d[0], ay - d[1], ax + d[2], ay + d[3], 0, 1.0));
                }
            }
            Ok(out)
        })
        .collect()
}

fn best_scale(gt: &DetBox, strides: &[usize], cells_per_side: f64) -> usize {
    let side = gt.w.max(gt.h);
    let mut best = (0, f64::INFINITY);
    for (i, &s) in strides.iter().enumerate() {
        let score = (side / (cells_per_side * s as f64)).log2().abs();
        if score < best.1 {
            best = (i, score);
        }
    }
    best.0
}

struct Proposal {
    gt: usize,
    iou: f64,
    area: f64,
}

/// Center-inside candidates at the best-fitting scale, top-k by IoU of the
/// decoded cell box; each cell keeps its highest-IoU proposal (ties go to
/// the smaller ground truth).
///
/// `decoded` comes from [`grid_boxes`]; `gts[b]` are the pixel boxes of image `b`.
pub fn assign_targets(
    decoded: &[Vec<DetBox>],
    gts: &[Vec<DetBox>],
    spec: &ModelSpec,
    cfg: &AssignConfig,
) -> Result<AssignedTargets> {
    let batch = gts.len();
    let size = spec.input_size as f64;
    if decoded.len() != spec.strides.len() {
        return Err(Error::shape("assign_targets", format!("expected 3 scales, got {}", decoded.len())));
    }
    let mut scales: Vec<ScaleTargets> = spec
        .strides
        .iter()
        .map(|&stride| {
            let g = spec.input_size / stride;
            ScaleTargets {
                stride,
                batch,
                h: g,
                w: g,
                cells: vec![None; batch * g * g],
            }
        })
        .collect();
    for (si, s) in scales.iter().enumerate() {
        if decoded[si].len() != s.cells.len() {
            return Err(Error::shape(
                "assign_targets",
                format!("scale {si}: {} decoded boxes for {} cells", decoded[si].len(), s.cells.len()),
            ));
        }
    }

    for (b, image_gts) in gts.iter().enumerate() {
        let mut proposals: Vec<Vec<Option<Proposal>>> = scales.iter().map(|s| (0..s.h * s.w).map(|_| None).collect()).collect();
        for (gi, gt) in image_gts.iter().enumerate() {
            gt.check()?;
            if gt.class_id >= spec.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth class {} >= num_classes {}",
                    gt.class_id, spec.num_classes
                )));
            }
            let si = best_scale(gt, &spec.strides, cfg.cells_per_side);
            let sc = &scales[si];
            let stride = sc.stride as f64;
            let [x1, y1, x2, y2] = gt.corners();
            let mut cands: Vec<usize> = Vec::new();
            for y in 0..sc.h {
                for x in 0..sc.w {
                    let (ax, ay) = sc.anchor(y, x);
                    if ax > x1 && ax < x2 && ay > y1 && ay < y2 {
                        cands.push(y * sc.w + x);
                    }
                }
            }
            if cands.is_empty() {
                let cx = ((gt.cx.clamp(0.0, size - 1e-9) / stride) as usize).min(sc.w - 1);
                let cy = ((gt.cy.clamp(0.0, size - 1e-9) / stride) as usize).min(sc.h - 1);
                cands.push(cy * sc.w + cx);
            }
            let base = b * sc.h * sc.w;
            let mut scored: Vec<(usize, f64)> = cands
                .into_iter()
                .map(|c| (c, decoded[si][base + c].iou_unchecked(gt)))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
            scored.truncate(cfg.top_k);
            for (cell, iou) in scored {
                let slot = &mut proposals[si][cell];
                let better = match slot {
                    None => true,
                    Some(p) => iou > p.iou || (iou == p.iou && gt.area() < p.area),
                };
                if better {
                    *slot = Some(Proposal {
                        gt: gi,
                        iou,
                        area: gt.area(),
                    });
                }
            }
        }
        for (si, sc) in scales.iter_mut().enumerate() {
            let stride = sc.stride as f64;
            let reg_max = spec.reg_max as f64;
            for (cell, p) in proposals[si].iter().enumerate() {
                let Some(p) = p else { continue };
                let gt = image_gts[p.gt];
                let (ax, ay) = sc.anchor(cell / sc.w, cell % sc.w);
                let [x1, y1, x2, y2] = gt.corners();
                let dist = [ax - x1, ay - y1, x2 - ax, y2 - ay].map(|d| (d / stride).clamp(0.0, reg_max));
                sc.cells[b * sc.h * sc.w + cell] = Some(CellMatch {
                    gt: p.gt,
                    class_id: gt.class_id,
                    target: gt,
                    dist,
                    iou: p.iou,
                });
            }
        }
    }
    Ok(AssignedTargets { scales })
}
