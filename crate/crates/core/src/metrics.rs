//! Detection evaluation: greedy matching, miss-rate/FPPI and
//! precision/recall curves, log-average miss rate.

use std::fmt::Write as _;

use crate::error::{FrpError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::refinement::ScoredBox;

pub const DEFAULT_IOU_MATCH: f64 = 0.5;

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<ScoredBox>,
    pub gts: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Per ground-truth box.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.true_positive.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.true_positive.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Detections in descending score order (ties by input index) each claim the
/// unmatched gt of highest IoU `>= iou_match`, ties to the lower gt index.
pub fn match_detections(dets: &[ScoredBox], gts: &[BoundingBox], iou_match: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut true_positive = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v >= iou_match && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            true_positive[i] = true;
        }
    }
    MatchResult {
        true_positive,
        gt_matched,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// Sorted by increasing threshold.
    pub points: Vec<CurvePoint>,
    pub log_average_miss_rate: f64,
    pub num_images: usize,
    pub num_gts: usize,
}

/// Every distinct detection score plus 0, ascending.
pub fn score_thresholds(results: &[ImageResult]) -> Vec<f64> {
    let mut t: Vec<f64> = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| d.score))
        .chain(std::iter::once(0.0))
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn counts_at(results: &[ImageResult], matches: &[MatchResult], threshold: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (r, m) in results.iter().zip(matches) {
        for (d, &is_tp) in r.detections.iter().zip(&m.true_positive) {
            if d.score >= threshold {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    (tp, fp)
}

/// Matches once per image, then counts detections at or above each threshold.
/// Because matching is greedy in score order, restricting to a threshold
/// keeps every flag unchanged.
fn build_curve(results: &[ImageResult], thresholds: &[f64], iou_match: f64) -> Result<EvalCurve> {
    if results.is_empty() {
        return Err(FrpError::Metric("evaluation needs at least one image".into()));
    }
    let num_gts: usize = results.iter().map(|r| r.gts.len()).sum();
    if num_gts == 0 {
        return Err(FrpError::Metric(
            "no ground-truth boxes in the evaluation set; miss rate is undefined".into(),
        ));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(FrpError::Metric("thresholds must be finite and non-empty".into()));
    }
    let matches: Vec<MatchResult> = results
        .iter()
        .map(|r| match_detections(&r.detections, &r.gts, iou_match))
        .collect();
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let n_img = results.len() as f64;
    let points = ts
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts_at(results, &matches, t);
            let recall = tp as f64 / num_gts as f64;
            CurvePoint {
                threshold: t,
                fppi: fp as f64 / n_img,
                miss_rate: 1.0 - recall,
                recall,
                precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
                tp,
                fp,
            }
        })
        .collect::<Vec<_>>();
    let mut curve = EvalCurve {
        points,
        log_average_miss_rate: 0.0,
        num_images: results.len(),
        num_gts,
    };
    curve.log_average_miss_rate = log_average_miss_rate(&curve)?;
    Ok(curve)
}

pub fn mr_fppi_curve(results: &[ImageResult], thresholds: &[f64], iou_match: f64) -> Result<EvalCurve> {
    build_curve(results, thresholds, iou_match)
}

/// Same samples as [`mr_fppi_curve`]; provided for callers that only read
/// the precision/recall columns.
pub fn pr_curve(results: &[ImageResult], thresholds: &[f64], iou_match: f64) -> Result<EvalCurve> {
    build_curve(results, thresholds, iou_match)
}

pub const LAMR_POINTS: usize = 9;
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// Nine FPPI references log-uniform over `[1e-2, 1]`.
pub fn fppi_references() -> [f64; LAMR_POINTS] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (LAMR_POINTS - 1) as f64))
}

/// Geometric mean of the miss rate sampled at [`fppi_references`]. Each
/// reference takes the lowest miss rate among points at the largest fppi not
/// above it, or the highest-threshold miss rate when every point lies above.
pub fn log_average_miss_rate(curve: &EvalCurve) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(FrpError::Metric("empty curve".into()));
    }
    let top = curve
        .points
        .iter()
        .max_by(|a, b| a.threshold.total_cmp(&b.threshold))
        .expect("non-empty");
    let mut log_sum = 0.0;
    for r in fppi_references() {
        let mut best: Option<&CurvePoint> = None;
        for p in curve.points.iter().filter(|p| p.fppi <= r) {
            best = match best {
                Some(b) if b.fppi > p.fppi || (b.fppi == p.fppi && b.miss_rate <= p.miss_rate) => Some(b),
                _ => Some(p),
            };
        }
        let mr = best.unwrap_or(top).miss_rate.max(MISS_RATE_FLOOR);
        log_sum += mr.ln();
    }
    Ok((log_sum / LAMR_POINTS as f64).exp())
}

impl EvalCurve {
    /// Point with the smallest threshold at or above `threshold`.
    pub fn at_threshold(&self, threshold: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.threshold >= threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fppi,miss_rate,recall,precision\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{}", p.threshold, p.fppi, p.miss_rate, p.recall, p.precision);
        }
        s
    }

    pub fn summary(&self) -> String {
        let lowest = self.points.first();
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.num_images);
        let _ = writeln!(s, "ground_truths = {}", self.num_gts);
        let _ = writeln!(s, "log_average_miss_rate = {}", self.log_average_miss_rate);
        if let Some(p) = lowest {
            let _ = writeln!(s, "min_threshold = {}", p.threshold);
            let _ = writeln!(s, "fppi_at_min_threshold = {}", p.fppi);
            let _ = writeln!(s, "recall_at_min_threshold = {}", p.recall);
            let _ = writeln!(s, "precision_at_min_threshold = {}", p.precision);
        }
        s
    }
}

/// One line per detection: `image_id score x1 y1 x2 y2`.
pub fn format_detections<'a, I>(per_image: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a [ScoredBox])>,
{
    let mut s = String::new();
    for (id, dets) in per_image {
        for d in dets {
            let [x1, y1, x2, y2] = d.bbox.coords();
            let _ = writeln!(s, "{id} {} {x1} {y1} {x2} {y2}", d.score);
        }
    }
    s
}

/// Parses a detections file; blank lines and `#` comments are skipped.
pub fn parse_detections(text: &str, path: &str) -> Result<Vec<(String, ScoredBox)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FrpError::Parse {
            path: path.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("'{f}' is not a number")))?;
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(err(format!("score {} outside [0, 1]", v[0])));
        }
        let bbox = BoundingBox::new(v[1], v[2], v[3], v[4]).map_err(|e| err(e.to_string()))?;
        out.push((fields[0].to_string(), ScoredBox { bbox, score: v[0] }));
    }
    Ok(out)
}
