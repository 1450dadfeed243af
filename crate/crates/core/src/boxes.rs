//! Axis-aligned boxes in normalized image coordinates and the offset
//! parameterization used by the box regressors.

use crate::error::{contract, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: Real,
    pub y_min: Real,
    pub x_max: Real,
    pub y_max: Real,
}

impl BBox {
    /// Checked constructor: both extents must be positive and finite.
    pub fn new(x_min: Real, y_min: Real, x_max: Real, y_max: Real) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(contract!("degenerate box {b:?}"))
        }
    }

    pub fn from_center(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        Self {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> Real {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> Real {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> Real {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (Real, Real) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Geometric-mean side length `sqrt(w * h)`.
    pub fn scale(&self) -> Real {
        libm::sqrt(self.area())
    }

    pub fn clip_unit(&self) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, 1.0),
            y_min: self.y_min.clamp(0.0, 1.0),
            x_max: self.x_max.clamp(0.0, 1.0),
            y_max: self.y_max.clamp(0.0, 1.0),
        }
    }

    pub fn iou(&self, other: &BBox) -> Real {
        iou(self, other)
    }

    /// Lexicographic `(x_min, y_min, x_max, y_max)` order.
    pub fn lex_cmp(&self, other: &BBox) -> core::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> Real {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `((cx_g - cx_a) / w_a, (cy_g - cy_a) / h_a, ln(w_g / w_a), ln(h_g / h_a))`.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<[Real; 4]> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(contract!("groundtruth {gt:?} has non-positive extent"));
    }
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(contract!("anchor {anchor:?} has non-positive extent"));
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gx - ax) / aw,
        (gy - ay) / ah,
        libm::log(gt.width() / aw),
        libm::log(gt.height() / ah),
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[Real; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        ax + offsets[0] * aw,
        ay + offsets[1] * ah,
        aw * libm::exp(offsets[2]),
        ah * libm::exp(offsets[3]),
    )
}
