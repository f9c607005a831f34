use std::f64::consts::PI;

use super::assign::AssignedTargets;
use crate::boxes::DetBox;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ScaleVars};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, UnaryKind, Var};

/// Keeps divisions defined for collapsed predicted boxes.
const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub dfl: f64,
    pub ciou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.5,
            dfl: 1.5,
            ciou: 7.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dfl: f64,
    pub ciou: f64,
    pub total: f64,
    pub weights: LossWeights,
}

fn column<T: Real>(tape: &mut Tape<T>, values: impl Iterator<Item = f64>) -> Result<Var> {
    let data: Vec<T> = values.map(T::lit).collect();
    let m = data.len();
    Ok(tape.constant(Tensor::new(vec![m, 1], data)?))
}

/// Summed CIoU loss of predicted `[M, 4]` distances (pixels; left, top,
/// right, bottom from `anchors`) against `gts`.
pub fn ciou_on_tape<T: Real>(tape: &mut Tape<T>, dist: Var, anchors: &[(f64, f64)], gts: &[DetBox]) -> Result<Var> {
    let m = anchors.len();
    if tape.shape(dist) != [m, 4] || gts.len() != m {
        return Err(Error::shape(
            "ciou_on_tape",
            format!("distances {:?} for {m} anchors and {} targets", tape.shape(dist), gts.len()),
        ));
    }
    let side = |tape: &mut Tape<T>, i| tape.slice(dist, 1, i, 1);
    let (l, t, r, b) = (side(tape, 0)?, side(tape, 1)?, side(tape, 2)?, side(tape, 3)?);
    let ax = column(tape, anchors.iter().map(|a| a.0))?;
    let ay = column(tape, anchors.iter().map(|a| a.1))?;
    let x1 = tape.sub(ax, l)?;
    let y1 = tape.sub(ay, t)?;
    let x2 = tape.add(ax, r)?;
    let y2 = tape.add(ay, b)?;
    let g = |tape: &mut Tape<T>, k: usize| column(tape, gts.iter().map(|g| g.corners()[k]));
    let (gx1, gy1, gx2, gy2) = (g(tape, 0)?, g(tape, 1)?, g(tape, 2)?, g(tape, 3)?);

    let pw = tape.add(l, r)?;
    let pw = tape.add_scalar(pw, T::lit(EPS));
    let ph = tape.add(t, b)?;
    let ph = tape.add_scalar(ph, T::lit(EPS));

    let ix2 = tape.minimum(x2, gx2)?;
    let ix1 = tape.maximum(x1, gx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let iy2 = tape.minimum(y2, gy2)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(pw, ph)?;
    let garea = column(tape, gts.iter().map(|g| g.area() + EPS))?;
    let union = tape.add(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let ex2 = tape.maximum(x2, gx2)?;
    let ex1 = tape.minimum(x1, gx1)?;
    let cw = tape.sub(ex2, ex1)?;
    let ey2 = tape.maximum(y2, gy2)?;
    let ey1 = tape.minimum(y1, gy1)?;
    let ch = tape.sub(ey2, ey1)?;
    let cw2 = tape.unary(cw, UnaryKind::Square);
    let ch2 = tape.unary(ch, UnaryKind::Square);
    let c2 = tape.add(cw2, ch2)?;
    let c2 = tape.add_scalar(c2, T::lit(EPS));

    let pcx = tape.add(x1, x2)?;
    let pcx = tape.mul_scalar(pcx, T::lit(0.5));
    let pcy = tape.add(y1, y2)?;
    let pcy = tape.mul_scalar(pcy, T::lit(0.5));
    let gcx = column(tape, gts.iter().map(|g| g.cx))?;
    let gcy = column(tape, gts.iter().map(|g| g.cy))?;
    let dx = tape.sub(pcx, gcx)?;
    let dy = tape.sub(pcy, gcy)?;
    let dx2 = tape.unary(dx, UnaryKind::Square);
    let dy2 = tape.unary(dy, UnaryKind::Square);
    let d2 = tape.add(dx2, dy2)?;
    let dist_term = tape.div(d2, c2)?;

    let ratio = tape.div(pw, ph)?;
    let pa = tape.unary(ratio, UnaryKind::Atan);
    let ga = column(tape, gts.iter().map(|g| (g.w / g.h).atan()))?;
    let da = tape.sub(ga, pa)?;
    let v = tape.unary(da, UnaryKind::Square);
    let v = tape.mul_scalar(v, T::lit(4.0 / (PI * PI)));
    // v^2 / ((1 - IoU) + v)
    let one_minus_iou = tape.unary(iou, UnaryKind::Neg);
    let one_minus_iou = tape.add_scalar(one_minus_iou, T::one());
    let denom = tape.add(one_minus_iou, v)?;
    let denom = tape.add_scalar(denom, T::lit(EPS));
    let v2 = tape.unary(v, UnaryKind::Square);
    let shape_term = tape.div(v2, denom)?;

    let loss = tape.add(one_minus_iou, dist_term)?;
    let loss = tape.add(loss, shape_term)?;
    Ok(tape.sum(loss))
}

fn add_opt<T: Real>(tape: &mut Tape<T>, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => v,
        Some(a) => tape.add(a, v)?,
    }))
}

/// Weighted sum `cls * bce + dfl * dfl + ciou * ciou`.
///
/// BCE is summed over every cell and class and divided by the number of
/// matched cells (at least 1); DFL is averaged over matched cells and their
/// four sides; CIoU is averaged over matched cells.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    scales: &[ScaleVars],
    targets: &AssignedTargets,
    spec: &ModelSpec,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if scales.len() != targets.scales.len() {
        return Err(Error::shape("total_loss", "scale count mismatch"));
    }
    let bins = spec.reg_max + 1;
    let matched = targets.num_matched();
    let norm = matched.max(1) as f64;
    let mut bce = None;
    let mut dfl = None;
    let mut ciou = None;

    for (sv, st) in scales.iter().zip(&targets.scales) {
        let (n, nc, h, w) = tape.value(sv.cls).dims4()?;
        if (n, h, w) != (st.batch, st.h, st.w) {
            return Err(Error::shape(
                "total_loss",
                format!("head output {:?} vs targets {}x{}x{}", tape.shape(sv.cls), st.batch, st.h, st.w),
            ));
        }
        let mut cls_t = Tensor::<T>::zeros(vec![n, nc, h, w]);
        let mut cells = Vec::new();
        let mut dist_t = Vec::new();
        let mut anchors = Vec::new();
        let mut gts = Vec::new();
        for ((b, y, x), m) in st.matched() {
            cls_t.data_mut()[((b * nc + m.class_id) * h + y) * w + x] = T::one();
            cells.push((b, y, x));
            dist_t.extend(m.dist.iter().map(|&d| T::lit(d)));
            anchors.push(st.anchor(y, x));
            gts.push(m.target);
        }
        let term = tape.bce_with_logits(sv.cls, &cls_t, T::one())?;
        bce = add_opt(tape, bce, term)?;
        if cells.is_empty() {
            continue;
        }
        let mcount = cells.len();
        let reg = tape.gather_cells(sv.reg, &cells)?;
        let reg = tape.reshape(reg, &[4 * mcount, bins])?;
        let d = tape.dfl_with_logits(reg, &dist_t)?;
        dfl = add_opt(tape, dfl, d)?;

        let probs = tape.softmax(reg, 1)?;
        let proj = tape.constant(Tensor::from_fn(vec![1, bins], |k| T::lit(k as f64)));
        let expect = tape.linear(probs, proj, None)?;
        let expect = tape.reshape(expect, &[mcount, 4])?;
        let px = tape.mul_scalar(expect, T::lit(st.stride as f64));
        let c = ciou_on_tape(tape, px, &anchors, &gts)?;
        ciou = add_opt(tape, ciou, c)?;
    }

    let bce = bce.ok_or_else(|| Error::shape("total_loss", "no scales"))?;
    let bce = tape.mul_scalar(bce, T::lit(1.0 / norm));
    let mut total = tape.mul_scalar(bce, T::lit(weights.cls));
    let mut breakdown = LossBreakdown {
        bce: tape.value(bce).data()[0].as_f64(),
        dfl: 0.0,
        ciou: 0.0,
        total: 0.0,
        weights: *weights,
    };
    if let Some(d) = dfl {
        let d = tape.mul_scalar(d, T::lit(1.0 / (4.0 * norm)));
        breakdown.dfl = tape.value(d).data()[0].as_f64();
        let wd = tape.mul_scalar(d, T::lit(weights.dfl));
        total = tape.add(total, wd)?;
    }
    if let Some(c) = ciou {
        let c = tape.mul_scalar(c, T::lit(1.0 / norm));
        breakdown.ciou = tape.value(c).data()[0].as_f64();
        let wc = tape.mul_scalar(c, T::lit(weights.ciou));
        total = tape.add(total, wc)?;
    }
    breakdown.total = tape.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}
