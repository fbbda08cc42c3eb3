//! Independent reference implementations and random instance builders shared
//! by the integration tests and the acceptance run.
#![allow(dead_code)]

use frp_core::classifier::ClassifierWeights;
use frp_core::detector::{AnchorConfig, DetectorConfig, DetectorWeights};
use frp_core::nn::{Activation, Conv2d, Dense, Layer, MaxPool2d, Sequential};
use frp_core::refinement::{ScoredBox, TabulatedScorer};
use frp_core::{BoundingBox, Image, Proposal};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BoundingBox {
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    let x1 = rng.gen_range(0.0..extent - w);
    let y1 = rng.gen_range(0.0..extent - h);
    bx(x1, y1, x1 + w, y1 + h)
}

/// A box near `b`, so instances contain positives as well as negatives.
pub fn jitter<R: Rng>(rng: &mut R, b: &BoundingBox, amount: f64) -> BoundingBox {
    let dw = b.width() * amount;
    let dh = b.height() * amount;
    let x1 = b.x1() + rng.gen_range(-dw..dw);
    let y1 = b.y1() + rng.gen_range(-dh..dh);
    let w = (b.width() + rng.gen_range(-dw..dw)).max(0.5);
    let h = (b.height() + rng.gen_range(-dh..dh)).max(0.5);
    bx(x1, y1, x1 + w, y1 + h)
}

// ---------------------------------------------------------------------------
// geometry and selection oracles

pub fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let ih = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let ua = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
    inter / ua
}

/// Exhaustive NMS: repeatedly take the best remaining detection and strike
/// every remaining detection that overlaps it.
pub fn nms_ref(dets: &[ScoredBox], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (si, sb) = (dets[i].score, dets[b].score);
                    let (ai, ab) = (dets[i].bbox.area(), dets[b].bbox.area());
                    if si > sb || (si == sb && ai < ab) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..dets.len() {
            if alive[j] && iou_ref(&dets[b].bbox, &dets[j].bbox) >= thresh {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Per-detection TP flags and per-gt matched flags by exhaustive greedy search.
pub fn match_ref(dets: &[ScoredBox], gts: &[BoundingBox], thresh: f64) -> (Vec<bool>, Vec<bool>) {
    let mut used_det = vec![false; dets.len()];
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![false; gts.len()];
    for _ in 0..dets.len() {
        let mut next: Option<usize> = None;
        for i in 0..dets.len() {
            if !used_det[i] && next.is_none_or(|n| dets[i].score > dets[n].score) {
                next = Some(i);
            }
        }
        let i = next.unwrap();
        used_det[i] = true;
        let mut pick: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou_ref(&dets[i].bbox, gt);
            if !matched[g] && v >= thresh && pick.is_none_or(|(_, pv)| v > pv) {
                pick = Some((g, v));
            }
        }
        if let Some((g, _)) = pick {
            matched[g] = true;
            tp[i] = true;
        }
    }
    (tp, matched)
}

/// Labelled training set of the reselection pipeline, evaluated per proposal.
/// Positives come first, then the surviving negatives, each in input order.
pub fn tfrp_ref(
    proposals: &[BoundingBox],
    scores: &[f64],
    gts: &[BoundingBox],
    eps_iou: f64,
    eps_t: f64,
) -> Vec<(BoundingBox, bool)> {
    let is_pos = |p: &BoundingBox| gts.iter().any(|g| iou_ref(p, g) >= eps_iou);
    let mut out: Vec<(BoundingBox, bool)> = proposals.iter().filter(|p| is_pos(p)).map(|p| (*p, true)).collect();
    for (p, s) in proposals.iter().zip(scores) {
        if !is_pos(p) && *s < eps_t {
            out.push((*p, false));
        }
    }
    out
}

pub fn cfrp_ref(scores: &[f64], eps_c: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= eps_c).collect()
}

pub fn sfrp_ref(whole: f64, left: f64, right: f64, eps: f64, eps_s: f64) -> bool {
    !(whole < eps || left < eps_s || right < eps_s)
}

/// Per-bin max over every grid cell whose unit interval overlaps the bin's
/// projected interval; a bin that overlaps no cell takes the cell under its
/// center.
pub fn roi_pool_ref(features: &Array3<f64>, b: &BoundingBox, stride: f64, size: usize) -> Array3<f64> {
    let (c, gh, gw) = features.dim();
    let cells = |lo: f64, hi: f64, limit: usize| -> Vec<usize> {
        let v: Vec<usize> = (0..limit).filter(|&j| (j as f64) < hi && (j as f64 + 1.0) > lo).collect();
        if v.is_empty() {
            let c = ((lo + hi) / 2.0).floor().max(0.0).min(limit as f64 - 1.0);
            vec![c as usize]
        } else {
            v
        }
    };
    let (x1, y1, x2, y2) = (b.x1() / stride, b.y1() / stride, b.x2() / stride, b.y2() / stride);
    let mut out = Array3::zeros((c, size, size));
    for by in 0..size {
        let lo_y = y1 + (y2 - y1) * by as f64 / size as f64;
        let hi_y = y1 + (y2 - y1) * (by + 1) as f64 / size as f64;
        for bxi in 0..size {
            let lo_x = x1 + (x2 - x1) * bxi as f64 / size as f64;
            let hi_x = x1 + (x2 - x1) * (bxi + 1) as f64 / size as f64;
            for ci in 0..c {
                let mut m = f64::NEG_INFINITY;
                for &yy in &cells(lo_y, hi_y, gh) {
                    for &xx in &cells(lo_x, hi_x, gw) {
                        m = m.max(features[(ci, yy, xx)]);
                    }
                }
                out[(ci, by, bxi)] = m;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// dense arithmetic forward pass

fn sigmoid_ref(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn act(v: f64, a: Activation) -> f64 {
    match a {
        Activation::Identity => v,
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Sigmoid => sigmoid_ref(v),
    }
}

/// Forward pass of a layer stack with explicit loops over every index.
pub fn forward_ref(net: &Sequential, x: &Array3<f64>) -> Array3<f64> {
    let mut cur = x.clone();
    for layer in &net.layers {
        cur = match layer {
            Layer::Conv(conv) => {
                let (c, h, w) = cur.dim();
                let k = conv.kernel as isize;
                let pad = k / 2;
                let mut out = Array3::zeros((conv.out_channels, h, w));
                for o in 0..conv.out_channels {
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let mut s = conv.bias[o];
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sy = y + ky - pad;
                                        let sx = xx + kx - pad;
                                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        let col = (ci as isize * k + ky) * k + kx;
                                        s += conv.weight[(o, col as usize)] * cur[(ci, sy as usize, sx as usize)];
                                    }
                                }
                            }
                            out[(o, y as usize, xx as usize)] = act(s, conv.activation);
                        }
                    }
                }
                out
            }
            Layer::Pool(_) => {
                let (c, h, w) = cur.dim();
                let mut out = Array3::zeros((c, h / 2, w / 2));
                for ci in 0..c {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let a = cur[(ci, 2 * y, 2 * xx)].max(cur[(ci, 2 * y + 1, 2 * xx)]);
                            let b = cur[(ci, 2 * y, 2 * xx + 1)].max(cur[(ci, 2 * y + 1, 2 * xx + 1)]);
                            out[(ci, y, xx)] = a.max(b);
                        }
                    }
                }
                out
            }
            Layer::Dense(d) => {
                let flat: Vec<f64> = cur.iter().copied().collect();
                let mut out = Array3::zeros((d.out_features, 1, 1));
                for o in 0..d.out_features {
                    let mut s = d.bias[o];
                    for (i, v) in flat.iter().enumerate() {
                        s += d.weight[(o, i)] * v;
                    }
                    out[(o, 0, 0)] = act(s, d.activation);
                }
                out
            }
        };
    }
    cur
}

// ---------------------------------------------------------------------------
// random micro networks

pub fn randomize(net: &mut Sequential, rng: &mut ChaCha8Rng, scale: f64) {
    let values: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-scale..scale)).collect();
    net.set_flat_params(&values).unwrap();
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| rng.gen_range(0.0..1.0))
}

/// conv(1->2) + pool + conv(2->3) + pool + dense(->1, sigmoid) on an 8x8 input.
pub fn micro_classifier(rng: &mut ChaCha8Rng) -> ClassifierWeights {
    let mut net = Sequential::new(vec![
        Layer::Conv(Conv2d::zeros(1, 2, 3, Activation::Relu)),
        Layer::Pool(MaxPool2d),
        Layer::Conv(Conv2d::zeros(2, 3, 3, Activation::Relu)),
        Layer::Pool(MaxPool2d),
        Layer::Dense(Dense::zeros(12, 1, Activation::Sigmoid)),
    ]);
    randomize(&mut net, rng, 0.8);
    ClassifierWeights::from_net(net, 8).unwrap()
}

pub fn micro_detector_config() -> DetectorConfig {
    DetectorConfig {
        input_channels: 1,
        backbone_widths: vec![2, 3],
        rpn_hidden: 4,
        anchors: AnchorConfig {
            heights: vec![6.0, 10.0],
            aspect: 0.5,
        },
        roi_size: 2,
        head_hidden: 5,
    }
}

pub fn micro_detector(rng: &mut ChaCha8Rng) -> DetectorWeights {
    let mut w = DetectorWeights::init(&micro_detector_config(), rng.gen()).unwrap();
    let values: Vec<f64> = (0..w.num_params()).map(|_| rng.gen_range(-0.6..0.6)).collect();
    w.set_flat_params(&values).unwrap();
    w
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(random_tensor(rng, (1, h, w))).unwrap()
}

// ---------------------------------------------------------------------------
// finite differences

/// Fraction of components whose analytic gradient matches the central
/// difference within `tol` relative error (absolute below `floor`).
pub fn gradient_agreement(
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> (usize, usize) {
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut ok = 0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(floor);
        if err <= tol {
            ok += 1;
        }
    }
    (ok, p.len())
}

// ---------------------------------------------------------------------------
// random refinement instances

pub struct Instance {
    pub proposals: Vec<Proposal>,
    pub scores: Vec<f64>,
    pub gts: Vec<BoundingBox>,
}

impl Instance {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn scorer(&self) -> TabulatedScorer {
        let mut t = TabulatedScorer::new();
        for (p, s) in self.proposals.iter().zip(&self.scores) {
            t.insert(p.bbox, *s);
        }
        t
    }
}

/// Up to 50 proposals (about half of them near a ground truth) and up to 8
/// ground truths in a 100x100 frame. Scores are drawn from a coarse grid so
/// that threshold ties occur.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_gt = rng.gen_range(0..=8);
    let gts: Vec<BoundingBox> = (0..n_gt).map(|_| random_box(rng, 100.0)).collect();
    let n = rng.gen_range(0..=50);
    let mut proposals = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let b = if !gts.is_empty() && rng.gen_bool(0.5) {
            let g = gts[rng.gen_range(0..gts.len())];
            jitter(rng, &g, 0.4)
        } else {
            random_box(rng, 100.0)
        };
        proposals.push(Proposal::new(b, rng.gen_range(0.0..=1.0)).unwrap());
        scores.push(rng.gen_range(0..=20) as f64 / 20.0);
    }
    Instance { proposals, scores, gts }
}

pub fn blank_image() -> Image {
    Image::filled(1, 8, 8, 0.0)
}

// ---------------------------------------------------------------------------
// hand-worked evaluation fixture

/// Two images, three pedestrians, four detections:
/// image a: gts g1 (0,0,10,20) and g2 (20,0,30,20); detections 0.9 on g1
/// (TP), 0.8 on empty ground (FP), 0.6 on g2 (TP).
/// image b: gt g3 (0,0,10,20); one detection 0.7 on empty ground (FP).
pub fn metrics_fixture() -> Vec<frp_core::metrics::ImageResult> {
    use frp_core::metrics::ImageResult;
    let d = |x1, y1, x2, y2, score| ScoredBox { bbox: bx(x1, y1, x2, y2), score };
    vec![
        ImageResult {
            detections: vec![
                d(0.0, 0.0, 10.0, 20.0, 0.9),
                d(40.0, 40.0, 50.0, 60.0, 0.8),
                d(20.0, 0.0, 30.0, 20.0, 0.6),
            ],
            gts: vec![bx(0.0, 0.0, 10.0, 20.0), bx(20.0, 0.0, 30.0, 20.0)],
        },
        ImageResult {
            detections: vec![d(50.0, 50.0, 60.0, 70.0, 0.7)],
            gts: vec![bx(0.0, 0.0, 10.0, 20.0)],
        },
    ]
}

/// `(threshold, tp, fp, fppi, miss rate, recall, precision)` by hand, ascending.
pub const FIXTURE_POINTS: [(f64, usize, usize, f64, f64, f64, f64); 5] = [
    (0.0, 2, 2, 1.0, 1.0 / 3.0, 2.0 / 3.0, 0.5),
    (0.6, 2, 2, 1.0, 1.0 / 3.0, 2.0 / 3.0, 0.5),
    (0.7, 1, 2, 1.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    (0.8, 1, 1, 0.5, 2.0 / 3.0, 1.0 / 3.0, 0.5),
    (0.9, 1, 0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 1.0),
];

/// References 0.01 .. 0.56 see miss rate 2/3 (fppi 0 or 0.5); reference 1
/// sees fppi 1 where the lowest miss rate is 1/3.
pub fn fixture_lamr() -> f64 {
    ((8.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 9.0).exp()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}
