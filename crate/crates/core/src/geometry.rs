//! Axis-aligned box arithmetic in continuous pixel coordinates.

use std::fmt;

use crate::error::{FrpError, Result};

/// Axis-aligned rectangle, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
///
/// Construction rejects non-finite coordinates and boxes without strictly
/// positive width and height, so every value of this type has a non-zero area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(FrpError::Geometry(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(FrpError::Geometry(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from center, width and height.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x1 + self.width() / 2.0, self.y1 + self.height() / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`; zero when the boxes only touch.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(self, other)
    }

    /// Vertical bisection at the horizontal center: `(left, right)`.
    pub fn split_vertical(&self) -> (BoundingBox, BoundingBox) {
        split_vertical(self)
    }

    pub fn clip_to_image(&self, width: f64, height: f64) -> Option<BoundingBox> {
        clip_to_image(self, width, height)
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

/// Intersection over union. Identical boxes give exactly 1, disjoint or
/// edge-touching boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn split_vertical(b: &BoundingBox) -> (BoundingBox, BoundingBox) {
    let x_cen = b.x1 + (b.x2 - b.x1) / 2.0;
    // For boxes narrower than two ulps the midpoint can land on an edge; the
    // halves then fall back to the nearest representable interior point.
    let x_cen = if x_cen <= b.x1 || x_cen >= b.x2 {
        let up = next_up(b.x1);
        if up < b.x2 {
            up
        } else {
            b.x2
        }
    } else {
        x_cen
    };
    let left = BoundingBox {
        x1: b.x1,
        y1: b.y1,
        x2: x_cen,
        y2: b.y2,
    };
    let right = BoundingBox {
        x1: x_cen,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    };
    (left, right)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Intersection of `b` with the image rectangle `(0, 0, w, h)`, or `None`
/// when nothing of positive area remains.
pub fn clip_to_image(b: &BoundingBox, w: f64, h: f64) -> Option<BoundingBox> {
    let x1 = b.x1.max(0.0);
    let y1 = b.y1.max(0.0);
    let x2 = b.x2.min(w);
    let y2 = b.y2.min(h);
    BoundingBox::new(x1, y1, x2, y2).ok()
}
