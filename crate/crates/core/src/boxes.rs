//! Axis-aligned box geometry in normalized center form.
//!
//! Boxes are `(cx, cy, w, h)` with every coordinate a fraction of the image
//! side. Geometry always runs in f64 so matching costs and evaluation share
//! one definition of overlap regardless of the training dtype.

use crate::{Error, Result};

/// Center-form box. Width and height must be strictly positive for any
/// overlap computation; degenerate boxes are rejected rather than clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCwh { cx, cy, w, h }
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self, op: &'static str) -> Result<()> {
        let finite =
            self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Contract(format!(
                "{op}: degenerate box (cx={}, cy={}, w={}, h={})",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Intersection-over-union in `[0, 1]`.
pub fn iou(a: &BoxCwh, b: &BoxCwh) -> Result<f64> {
    a.check("iou")?;
    b.check("iou")?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU in `[-1, 1]`: IoU minus the fraction of the smallest
/// enclosing box not covered by the union.
pub fn giou(a: &BoxCwh, b: &BoxCwh) -> Result<f64> {
    a.check("giou")?;
    b.check("giou")?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = ax1.max(bx1) - ax0.min(bx0);
    let eh = ay1.max(by1) - ay0.min(by0);
    let enclose = ew * eh;
    Ok(inter / union - (enclose - union) / enclose)
}

/// Sum of absolute coordinate differences in center form.
pub fn l1_cwh(a: &BoxCwh, b: &BoxCwh) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}
