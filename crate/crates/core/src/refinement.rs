//! Proposal selection rules: IoU assignment, training-time negative
//! reselection, classifier-guided proposal filtering, the split-proposal
//! confidence gate, and greedy NMS.
//!
//! Every rule is a pure filter over its input. Image-crop scores come from a
//! pluggable [`ProposalScorer`], so the set algebra can be exercised with
//! tabulated scores and no trained network.

use std::cmp::Ordering;

use crate::classifier::{score_box, ClassifierWeights};
use crate::error::{FrpError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::imaging::Image;

/// A candidate box from the proposal layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    objectness: f64,
}

impl Proposal {
    pub fn new(bbox: BoundingBox, objectness: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&objectness) {
            return Err(FrpError::Data(format!("objectness {objectness} outside [0, 1]")));
        }
        Ok(Self { bbox, objectness })
    }

    pub fn objectness(&self) -> f64 {
        self.objectness
    }
}

/// Split of a proposal set into positives and negatives by best IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub positives: Vec<Proposal>,
    /// Index of the best-matching ground truth for each positive.
    pub positive_gt: Vec<usize>,
    pub negatives: Vec<Proposal>,
    /// Best IoU of every input proposal, in input order (0 with no ground truth).
    pub best_iou: Vec<f64>,
}

/// Thresholds of the selection rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrpThresholds {
    /// IoU at or above which a proposal is a positive training sample.
    pub eps_iou: f64,
    /// Classifier score at or above which a negative is dropped from training.
    pub eps_t: f64,
    /// Classifier score a proposal needs to survive inference-time filtering.
    pub eps_c: f64,
    /// Detection score threshold for the whole proposal.
    pub eps: f64,
    /// Detection score threshold for each vertical half.
    pub eps_s: f64,
}

impl Default for FrpThresholds {
    fn default() -> Self {
        Self {
            eps_iou: 0.5,
            eps_t: 0.5,
            eps_c: 0.3,
            eps: 0.5,
            eps_s: 0.1,
        }
    }
}

impl FrpThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_iou", self.eps_iou),
            ("eps_t", self.eps_t),
            ("eps_c", self.eps_c),
            ("eps", self.eps),
            ("eps_s", self.eps_s),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FrpError::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.eps_iou <= 0.0 || self.eps_iou >= 1.0 {
            return Err(FrpError::Config(format!("eps_iou = {} must lie in (0, 1)", self.eps_iou)));
        }
        Ok(())
    }
}

/// Classification scores of a proposal and of its two vertical halves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfrpScores {
    pub whole: f64,
    pub left: f64,
    pub right: f64,
}

impl SfrpScores {
    pub fn new(whole: f64, left: f64, right: f64) -> Result<Self> {
        for v in [whole, left, right] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FrpError::Data(format!("split score {v} outside [0, 1]")));
            }
        }
        Ok(Self { whole, left, right })
    }
}

/// Source of pedestrian confidence for the image region under a box.
pub trait ProposalScorer {
    fn score(&self, image: &Image, b: &BoundingBox) -> Result<f64>;
}

impl ProposalScorer for ClassifierWeights {
    fn score(&self, image: &Image, b: &BoundingBox) -> Result<f64> {
        score_box(self, image, b)
    }
}

impl<F> ProposalScorer for F
where
    F: Fn(&Image, &BoundingBox) -> Result<f64>,
{
    fn score(&self, image: &Image, b: &BoundingBox) -> Result<f64> {
        self(image, b)
    }
}

/// Scores looked up by exact box coordinates; unknown boxes are an error.
#[derive(Debug, Clone, Default)]
pub struct TabulatedScorer {
    entries: Vec<([u64; 4], f64)>,
}

impl TabulatedScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, b: BoundingBox, score: f64) {
        let key = b.coords().map(f64::to_bits);
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = score,
            None => self.entries.push((key, score)),
        }
    }
}

impl ProposalScorer for TabulatedScorer {
    fn score(&self, _image: &Image, b: &BoundingBox) -> Result<f64> {
        let key = b.coords().map(f64::to_bits);
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| *s)
            .ok_or_else(|| FrpError::Data(format!("no tabulated score for {b}")))
    }
}

fn checked_score<S: ProposalScorer + ?Sized>(scorer: &S, image: &Image, b: &BoundingBox) -> Result<f64> {
    let s = scorer.score(image, b)?;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(FrpError::Data(format!("non-finite score for {b}")))
    }
}

/// Positive iff the best IoU against any ground truth reaches `eps_iou`.
pub fn assign_by_iou(proposals: &[Proposal], gts: &[BoundingBox], eps_iou: f64) -> AssignmentResult {
    let mut out = AssignmentResult {
        positives: Vec::new(),
        positive_gt: Vec::new(),
        negatives: Vec::new(),
        best_iou: Vec::with_capacity(proposals.len()),
    };
    for p in proposals {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(&p.bbox, gt);
            if best_gt.is_none() || v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        out.best_iou.push(best);
        match best_gt {
            Some(gi) if best >= eps_iou => {
                out.positives.push(*p);
                out.positive_gt.push(gi);
            }
            _ => out.negatives.push(*p),
        }
    }
    out
}

/// Keeps the negatives the scorer rates below `eps_t`; negatives that look
/// like pedestrians are dropped, not relabelled. A proposal whose score cannot
/// be computed stays a negative.
pub fn tfrp_refine<S: ProposalScorer + ?Sized>(
    negatives: &[Proposal],
    scorer: &S,
    image: &Image,
    eps_t: f64,
) -> Vec<Proposal> {
    negatives
        .iter()
        .filter(|p| match checked_score(scorer, image, &p.bbox) {
            Ok(s) => s < eps_t,
            Err(e) => {
                log::warn!("scoring negative {} failed ({e}); keeping it", p.bbox);
                true
            }
        })
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledProposal {
    pub proposal: Proposal,
    pub positive: bool,
}

/// Disjoint union of positives and refined negatives, positives first.
pub fn tfrp_training_set(positives: &[Proposal], refined_negatives: &[Proposal]) -> Result<Vec<LabeledProposal>> {
    if let Some(p) = positives.iter().find(|p| refined_negatives.contains(p)) {
        return Err(FrpError::Logic(format!(
            "proposal {} is both positive and negative",
            p.bbox
        )));
    }
    Ok(positives
        .iter()
        .map(|&proposal| LabeledProposal { proposal, positive: true })
        .chain(
            refined_negatives
                .iter()
                .map(|&proposal| LabeledProposal { proposal, positive: false }),
        )
        .collect())
}

/// Keeps proposals the scorer rates at or above `eps_c`, in input order. A
/// proposal whose score cannot be computed is kept.
pub fn cfrp_filter<S: ProposalScorer + ?Sized>(
    proposals: &[Proposal],
    scorer: &S,
    image: &Image,
    eps_c: f64,
) -> Vec<Proposal> {
    cfrp_filter_indices(proposals, scorer, image, eps_c)
        .into_iter()
        .map(|i| proposals[i])
        .collect()
}

pub fn cfrp_filter_indices<S: ProposalScorer + ?Sized>(
    proposals: &[Proposal],
    scorer: &S,
    image: &Image,
    eps_c: f64,
) -> Vec<usize> {
    // With eps_c = 0 every finite score passes; skip the classifier entirely.
    if eps_c <= 0.0 {
        return (0..proposals.len()).collect();
    }
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| match checked_score(scorer, image, &p.bbox) {
            Ok(s) => s >= eps_c,
            Err(e) => {
                log::warn!("scoring proposal {} failed ({e}); keeping it", p.bbox);
                true
            }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Keep iff the whole box reaches `eps` and both halves reach `eps_s`.
pub fn sfrp_decide(s: &SfrpScores, eps: f64, eps_s: f64) -> bool {
    s.whole >= eps && s.left >= eps_s && s.right >= eps_s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Greedy NMS. Visits detections by descending score (ties: smaller area,
/// then input index) and keeps one iff its IoU with every kept detection is
/// below `iou_thresh`. Returns kept input indices in visiting order.
pub fn nms_indices(dets: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                dets[a]
                    .bbox
                    .area()
                    .partial_cmp(&dets[b].bbox.area())
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.cmp(&b))
    });
    nms_in_order(dets, &order, iou_thresh)
}

/// Greedy suppression over a caller-supplied visiting order.
pub fn nms_in_order(dets: &[ScoredBox], order: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou(&dets[i].bbox, &dets[k].bbox) < iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}
