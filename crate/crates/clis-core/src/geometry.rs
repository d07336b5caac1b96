//! Box geometry shared by the detector, the evaluator, and augmentation.
//!
//! Boxes are center-parameterized `(cx, cy, w, h)` in pixel units, matching
//! the annotation format. Conversions to corner form happen internally where
//! intersection tests need them.

use serde::{Deserialize, Serialize};

/// Axis-aligned box, center parameterization, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w * 0.5,
            self.cy - self.h * 0.5,
            self.cx + self.w * 0.5,
            self.cy + self.h * 0.5,
        )
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) * 0.5,
            cy: (y0 + y1) * 0.5,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Whether the box lies fully inside a `width x height` canvas.
    pub fn within_bounds(&self, width: f64, height: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 >= -1e-6 && y0 >= -1e-6 && x1 <= width + 1e-6 && y1 <= height + 1e-6
    }

    /// Clip the box so it fits inside a `width x height` canvas.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        Self::from_corners(
            x0.clamp(0.0, width),
            y0.clamp(0.0, height),
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
        )
    }

    /// Scale both coordinates and extents (similarity transform about origin).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cx: self.cx * factor,
            cy: self.cy * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }

    /// Mirror horizontally across a canvas of the given width.
    pub fn hflipped(&self, width: f64) -> Self {
        Self {
            cx: width - self.cx,
            ..*self
        }
    }
}

/// Intersection-over-union of two boxes. Degenerate boxes yield 0.
pub fn iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of `a`'s area covered by the intersection with `b`.
pub fn intersection_over_area(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let area = a.area();
    if area <= 0.0 {
        0.0
    } else {
        iw * ih / area
    }
}

/// Encode a target box relative to an anchor as `(dx, dy, dw, dh)`.
///
/// `dx = (cx_t - cx_a) / w_a`, `dw = ln(w_t / w_a)`, and likewise for y/h.
pub fn encode_deltas(target: &BoxCxcywh, anchor: &BoxCxcywh) -> [f64; 4] {
    [
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ]
}

/// Invert [`encode_deltas`] exactly.
pub fn decode_deltas(deltas: &[f64; 4], anchor: &BoxCxcywh) -> BoxCxcywh {
    BoxCxcywh {
        cx: anchor.cx + deltas[0] * anchor.w,
        cy: anchor.cy + deltas[1] * anchor.h,
        w: anchor.w * deltas[2].exp(),
        h: anchor.h * deltas[3].exp(),
    }
}

/// Decode with `dw`/`dh` clamped; used on raw network predictions where an
/// untrained head can emit arbitrarily large deltas.
pub fn decode_deltas_clamped(deltas: &[f64; 4], anchor: &BoxCxcywh) -> BoxCxcywh {
    const DELTA_CLAMP: f64 = 4.0; // exp(4) ~ 54x the anchor
    decode_deltas(
        &[
            deltas[0].clamp(-DELTA_CLAMP, DELTA_CLAMP),
            deltas[1].clamp(-DELTA_CLAMP, DELTA_CLAMP),
            deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP),
            deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP),
        ],
        anchor,
    )
}

/// Greedy NMS over `(box, score)` pairs; returns indices of kept boxes in
/// descending score order. Ties are broken by the original index so the
/// result is deterministic.
pub fn nms(boxes: &[BoxCxcywh], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
