//! Anchor grid and the standard center/log-size box parameterization.

use crate::error::Result;
use crate::geometry::BoundingBox;

/// Upper bound on log-scale deltas at decode time (a 1000/16 size ratio).
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// Anchor heights in pixels, one anchor per height at every feature cell.
    pub heights: Vec<f64>,
    /// Width over height; 0.4 is the upright 1:2.5 pedestrian prior.
    pub aspect: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            heights: vec![24.0, 36.0, 52.0],
            aspect: 0.4,
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.heights.len()
    }

    /// Anchors of a `grid_h x grid_w` feature grid. Anchor index is
    /// `(y * grid_w + x) * per_cell + a`.
    pub fn generate(&self, grid_h: usize, grid_w: usize, stride: f64) -> Result<Vec<BoundingBox>> {
        let mut out = Vec::with_capacity(grid_h * grid_w * self.per_cell());
        for y in 0..grid_h {
            for x in 0..grid_w {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for &h in &self.heights {
                    out.push(BoundingBox::from_center(cx, cy, h * self.aspect, h)?);
                }
            }
        }
        Ok(out)
    }
}

/// Regression target taking `reference` onto `target`: `(dx, dy, dw, dh)`.
pub fn encode(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (px, py) = reference.center();
    let (gx, gy) = target.center();
    let (pw, ph) = (reference.width(), reference.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

/// Applies deltas to `reference`. Zero deltas return `reference` unchanged.
pub fn decode(reference: &BoundingBox, deltas: &[f64; 4]) -> Result<BoundingBox> {
    if deltas == &[0.0; 4] {
        return Ok(*reference);
    }
    let (px, py) = reference.center();
    let (pw, ph) = (reference.width(), reference.height());
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * deltas[2].min(MAX_LOG_DELTA).exp();
    let h = ph * deltas[3].min(MAX_LOG_DELTA).exp();
    BoundingBox::from_center(cx, cy, w, h)
}
