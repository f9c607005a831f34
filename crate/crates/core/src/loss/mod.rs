//! Classification (BCE), distribution (DFL) and box (CIoU) losses, target
//! assignment, and the weighted training objective.

mod assign;
mod total;


pub use assign::{assign_targets, grid_boxes, AssignConfig, AssignedTargets, CellMatch, ScaleTargets};
pub use total::{ciou_on_tape, total_loss, LossBreakdown, LossWeights};

use std::f64::consts::PI;

use crate::boxes::DetBox;
use crate::error::{Error, Result};

/// Probability clamp of [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Mean of `-w [y ln x + (1 - y) ln(1 - x)]` with `x` clamped to `[eps, 1 - eps]`.
pub fn bce_loss(x: &[f64], y: &[f64], w: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "bce_loss: {} predictions vs {} labels",
            x.len(),
            y.len()
        )));
    }
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&x, &y)| {
            let x = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -w * (y * x.ln() + (1.0 - y) * (1.0 - x).ln())
        })
        .sum();
    Ok(s / x.len() as f64)
}

/// Distribution focal loss of one side: `-[(y_{n+1} - y) ln S_n + (y - y_n) ln S_{n+1}]`
/// where `y_n <= y <= y_{n+1}` are the bins bracketing `y`.
pub fn dfl_loss(bin_probs: &[f64], y: f64) -> Result<f64> {
    let reg_max = bin_probs.len().saturating_sub(1);
    if reg_max < 1 {
        return Err(Error::InvalidArgument("dfl_loss needs at least two bins".into()));
    }
    if !(0.0..=reg_max as f64).contains(&y) {
        return Err(Error::InvalidArgument(format!("dfl_loss: target {y} outside [0, {reg_max}]")));
    }
    let lo = (y.floor() as usize).min(reg_max - 1);
    let (wl, wr) = (lo as f64 + 1.0 - y, y - lo as f64);
    let term = |w: f64, p: f64| if w == 0.0 { 0.0 } else { w * p.ln() };
    Ok(-(term(wl, bin_probs[lo]) + term(wr, bin_probs[lo + 1])))
}

/// Aspect-ratio consistency `v = 4/pi^2 (atan(w_gt/h_gt) - atan(w_p/h_p))^2`.
pub fn aspect_term_v(w_gt: f64, h_gt: f64, w_p: f64, h_p: f64) -> Result<f64> {
    if !(w_gt > 0.0 && h_gt > 0.0 && w_p > 0.0 && h_p > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aspect_term_v: non-positive dimension ({w_gt}, {h_gt}, {w_p}, {h_p})"
        )));
    }
    let d = (w_gt / h_gt).atan() - (w_p / h_p).atan();
    Ok(4.0 / (PI * PI) * d * d)
}

/// Components of the CIoU loss of one box pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    /// Squared center distance.
    pub d2: f64,
    /// Squared diagonal of the smallest enclosing box.
    pub c2: f64,
    pub v: f64,
    pub loss: f64,
}

pub fn ciou_terms(p: &DetBox, gt: &DetBox) -> Result<CiouTerms> {
    p.check()?;
    gt.check()?;
    let iou = p.iou_unchecked(gt);
    let [px1, py1, px2, py2] = p.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();
    let d2 = (p.cx - gt.cx).powi(2) + (p.cy - gt.cy).powi(2);
    let c2 = (px2.max(gx2) - px1.min(gx1)).powi(2) + (py2.max(gy2) - py1.min(gy1)).powi(2);
    let v = aspect_term_v(gt.w, gt.h, p.w, p.h)?;
    let denom = (1.0 - iou) + v;
    let shape = if denom > 0.0 { v * v / denom } else { 0.0 };
    Ok(CiouTerms {
        iou,
        d2,
        c2,
        v,
        loss: 1.0 - iou + d2 / c2 + shape,
    })
}

/// `1 - IoU + d^2/c^2 + v^2 / ((1 - IoU) + v)`.
pub fn ciou_loss(p: &DetBox, gt: &DetBox) -> Result<f64> {
    Ok(ciou_terms(p, gt)?.loss)
}
