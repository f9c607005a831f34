//! Axis-aligned boxes in pixel coordinates.

use crate::error::{Error, Result};

/// Center/size box with class and confidence. Ground truth carries confidence 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub confidence: f64,
}

impl DetBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, confidence: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class_id,
            confidence,
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, confidence: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, class_id, confidence)
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
    }

    pub fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::InvalidArgument(format!(
                "degenerate box (w={}, h={}) at ({}, {})",
                self.w, self.h, self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        Self::from_corners(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
            self.class_id,
            self.confidence,
        )
    }

    /// Intersection over union without validity checks; 0 when the union is empty.
    pub fn iou_unchecked(&self, other: &DetBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}
