//! RoI max pooling from a strided feature grid.

use ndarray::Array3;

use crate::error::{FrpError, Result};
use crate::geometry::BoundingBox;

/// Pooled features and, per output element, the grid cell it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRoi {
    pub features: Array3<f64>,
    pub argmax: Vec<(usize, usize, usize)>,
}

/// Cell range `[start, end)` covered by the bin `[lo, hi)` of a grid of
/// `limit` cells. A bin left empty by clamping falls back to the cell nearest
/// its center.
fn bin_cells(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let start = lo.floor().max(0.0) as usize;
    let end = (hi.ceil().max(0.0) as usize).min(limit);
    if start < end {
        (start, end)
    } else {
        let c = ((lo + hi) / 2.0).floor().clamp(0.0, (limit - 1) as f64) as usize;
        (c, c + 1)
    }
}

/// Projects `b` (image pixels) onto the grid by dividing by `stride`, splits
/// the projected region into `output_size x output_size` bins with
/// floor/ceil cell boundaries, and takes the max of each bin per channel.
pub fn roi_pool(features: &Array3<f64>, b: &BoundingBox, stride: f64, output_size: usize) -> Result<PooledRoi> {
    let (c, gh, gw) = features.dim();
    if output_size == 0 || gh == 0 || gw == 0 {
        return Err(FrpError::Shape("empty RoI pooling geometry".into()));
    }
    let [x1, y1, x2, y2] = b.coords().map(|v| v / stride);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= gw as f64 || y1 >= gh as f64 {
        return Err(FrpError::Geometry(format!(
            "box {b} projects outside the {gh}x{gw} feature grid"
        )));
    }
    let n = output_size as f64;
    let xs: Vec<(usize, usize)> = (0..output_size)
        .map(|i| bin_cells(x1 + (x2 - x1) * i as f64 / n, x1 + (x2 - x1) * (i + 1) as f64 / n, gw))
        .collect();
    let ys: Vec<(usize, usize)> = (0..output_size)
        .map(|i| bin_cells(y1 + (y2 - y1) * i as f64 / n, y1 + (y2 - y1) * (i + 1) as f64 / n, gh))
        .collect();

    let mut out = Array3::<f64>::zeros((c, output_size, output_size));
    let mut argmax = Vec::with_capacity(c * output_size * output_size);
    for ci in 0..c {
        for (by, &(ys0, ys1)) in ys.iter().enumerate() {
            for (bx, &(xs0, xs1)) in xs.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut arg = (ci, ys0, xs0);
                for yy in ys0..ys1 {
                    for xx in xs0..xs1 {
                        let v = features[(ci, yy, xx)];
                        if v > best {
                            best = v;
                            arg = (ci, yy, xx);
                        }
                    }
                }
                out[(ci, by, bx)] = best;
                argmax.push(arg);
            }
        }
    }
    Ok(PooledRoi { features: out, argmax })
}

/// Routes the gradient of the pooled map back onto the grid.
pub fn roi_pool_backward(pooled: &PooledRoi, dpooled: &Array3<f64>, dfeatures: &mut Array3<f64>) {
    for (d, idx) in dpooled.iter().zip(pooled.argmax.iter()) {
        dfeatures[*idx] += *d;
    }
}
