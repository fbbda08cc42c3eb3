//! Inference with optional classifier filtering and the split-proposal gate.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;

use super::{
    decode, generate_proposals, roi_pool, subnetwork_forward, subnetwork_score, DetectorWeights, ProposalConfig,
};
use crate::error::{FrpError, Result};
use crate::geometry::{split_vertical, BoundingBox};
use crate::imaging::Image;
use crate::refinement::{cfrp_filter_indices, nms_indices, sfrp_decide, FrpThresholds, ProposalScorer, ScoredBox, SfrpScores};

/// Which inference-time refinements run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InferenceMode {
    pub use_cfrp: bool,
    pub use_sfrp: bool,
}

impl InferenceMode {
    pub const BASELINE: Self = Self {
        use_cfrp: false,
        use_sfrp: false,
    };
    /// Split-proposal gate only; no classifier at test time.
    pub const COMPACT: Self = Self {
        use_cfrp: false,
        use_sfrp: true,
    };
    pub const FULL: Self = Self {
        use_cfrp: true,
        use_sfrp: true,
    };

    pub fn name(&self) -> &'static str {
        match (self.use_cfrp, self.use_sfrp) {
            (false, false) => "baseline",
            (false, true) => "sfrp",
            (true, true) => "full",
            (true, false) => "cfrp",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = FrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::BASELINE),
            "sfrp" | "compact" => Ok(Self::COMPACT),
            "full" => Ok(Self::FULL),
            "cfrp" => Ok(Self {
                use_cfrp: true,
                use_sfrp: false,
            }),
            other => Err(FrpError::Config(format!(
                "unknown mode '{other}' (expected baseline, sfrp or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    /// Proposals kept from the proposal layer.
    pub top_k: usize,
    pub proposal: ProposalConfig,
    /// Final NMS overlap threshold.
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 50,
            proposal: ProposalConfig::default(),
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    /// Whole/left/right scores when the split gate ran.
    pub split: Option<SfrpScores>,
    /// Position of the source proposal in the proposal-layer output.
    pub proposal_index: usize,
    /// The source proposal before regression.
    pub proposal: BoundingBox,
}

/// Every proposal that passes the enabled gates, before NMS, in proposal
/// order.
pub fn detect_pre_nms<S: ProposalScorer + ?Sized>(
    weights: &DetectorWeights,
    classifier: &S,
    image: &Image,
    mode: InferenceMode,
    thresholds: &FrpThresholds,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let data = image.data();
    let (c, ih, iw) = data.dim();
    let stride = weights.stride();
    if c != weights.input_channels() {
        return Err(FrpError::Shape(format!(
            "detector expects {} channels, image has {c}",
            weights.input_channels()
        )));
    }
    if ih % stride != 0 || iw % stride != 0 {
        return Err(FrpError::Shape(format!("image {ih}x{iw} is not divisible by stride {stride}")));
    }
    let features: Array3<f64> = weights.backbone.forward(data)?;
    let rpn = super::rpn_forward(weights, &features)?;
    let ranked = generate_proposals(weights, &rpn, (ih, iw), config.top_k, &config.proposal)?;

    let candidates: Vec<usize> = if mode.use_cfrp {
        let proposals: Vec<_> = ranked.iter().map(|r| r.proposal).collect();
        cfrp_filter_indices(&proposals, classifier, image, thresholds.eps_c)
    } else {
        (0..ranked.len()).collect()
    };

    let stride = stride as f64;
    let pool = |b: &BoundingBox| roi_pool(&features, b, stride, weights.roi_size).map(|p| p.features);
    let mut out = Vec::new();
    for idx in candidates {
        let bbox = ranked[idx].proposal.bbox;
        let head = subnetwork_forward(weights, &pool(&bbox)?)?;
        let (keep, split) = if mode.use_sfrp {
            let (left, right) = split_vertical(&bbox);
            let scores = SfrpScores::new(
                head.score,
                subnetwork_score(weights, &pool(&left)?)?,
                subnetwork_score(weights, &pool(&right)?)?,
            )?;
            (sfrp_decide(&scores, thresholds.eps, thresholds.eps_s), Some(scores))
        } else {
            (head.score >= thresholds.eps, None)
        };
        if !keep {
            continue;
        }
        let Some(refined) = decode(&bbox, &head.deltas)?.clip_to_image(iw as f64, ih as f64) else {
            continue;
        };
        out.push(Detection {
            bbox: refined,
            score: head.score,
            split,
            proposal_index: idx,
            proposal: bbox,
        });
    }
    Ok(out)
}

/// Final detections after NMS, sorted by score descending.
pub fn detect<S: ProposalScorer + ?Sized>(
    weights: &DetectorWeights,
    classifier: &S,
    image: &Image,
    mode: InferenceMode,
    thresholds: &FrpThresholds,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let pre = detect_pre_nms(weights, classifier, image, mode, thresholds, config)?;
    let scored: Vec<ScoredBox> = pre
        .iter()
        .map(|d| ScoredBox {
            bbox: d.bbox,
            score: d.score,
        })
        .collect();
    Ok(nms_indices(&scored, config.nms_iou).into_iter().map(|i| pre[i]).collect())
}
