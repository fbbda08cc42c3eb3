//! Toy two-stage detector: a strided convolutional backbone, an anchor-based
//! proposal layer, RoI pooling, and a subnetwork with a classification head
//! and a box-regression head.
//!
//! Negative reselection plugs into [`train_detector`]; classifier-guided
//! filtering and the split-proposal gate plug into [`detect`].

mod anchors;
mod infer;
mod roi;
mod train;

use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use anchors::{decode, encode, AnchorConfig, MAX_LOG_DELTA};
pub use infer::{detect, detect_pre_nms, Detection, InferenceConfig, InferenceMode};
pub use roi::{roi_pool, roi_pool_backward, PooledRoi};
pub use train::{
    detector_loss_and_gradient, head_loss_and_gradient, sample_image_targets, train_detector,
    train_detector_with_report, DetectorTrainConfig, DetectorTrainingReport, HeadSample, ImageTargets,
};

use crate::container::{self, LayerRecord, RecordKind, DETECTOR_MAGIC};
use crate::error::{FrpError, Result};
use crate::geometry::BoundingBox;
use crate::nn::{sigmoid, Activation, Conv2d, Dense, Layer, LayerCache, MaxPool2d, Sequential};
use crate::refinement::{nms_in_order, Proposal, ScoredBox};

/// Architecture of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub input_channels: usize,
    /// Output channels of the backbone conv stages; each stage halves the
    /// resolution, so the stride is `2^stages`.
    pub backbone_widths: Vec<usize>,
    pub rpn_hidden: usize,
    pub anchors: AnchorConfig,
    pub roi_size: usize,
    pub head_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            backbone_widths: vec![8, 16, 32],
            rpn_hidden: 32,
            anchors: AnchorConfig::default(),
            roi_size: 4,
            head_hidden: 64,
        }
    }
}

/// Proposal-layer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub nms_iou: f64,
    /// Boxes narrower or shorter than this after clipping are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            min_size: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub backbone: Sequential,
    /// 3x3 conv + relu shared by both proposal heads.
    pub rpn_hidden: Sequential,
    /// 1x1 conv, one objectness logit per anchor.
    pub rpn_cls: Sequential,
    /// 1x1 conv, four deltas per anchor.
    pub rpn_reg: Sequential,
    /// Dense + relu over the flattened pooled map.
    pub trunk: Sequential,
    /// Classification head, sigmoid output.
    pub cls: Sequential,
    /// Regression head, four deltas.
    pub reg: Sequential,
    pub anchors: AnchorConfig,
    pub roi_size: usize,
}

/// Backbone output plus what the training pass needs to backpropagate.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub features: Array3<f64>,
    pub stride: f64,
    pub(crate) caches: Vec<LayerCache>,
}

/// Raw proposal-layer outputs: objectness logits `(A, H, W)` and deltas
/// `(4A, H, W)`.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub logits: Array3<f64>,
    pub deltas: Array3<f64>,
    pub(crate) hidden_caches: Vec<LayerCache>,
    pub(crate) cls_caches: Vec<LayerCache>,
    pub(crate) reg_caches: Vec<LayerCache>,
}

impl DetectorWeights {
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(config, &mut rng)
    }

    pub(crate) fn init_with_rng(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.backbone_widths.is_empty()
            || config.backbone_widths.contains(&0)
            || config.input_channels == 0
            || config.rpn_hidden == 0
            || config.roi_size == 0
            || config.head_hidden == 0
        {
            return Err(FrpError::Config("detector layer sizes must be positive".into()));
        }
        if config.anchors.heights.is_empty()
            || config.anchors.heights.iter().any(|h| !(h.is_finite() && *h > 0.0))
            || !(config.anchors.aspect.is_finite() && config.anchors.aspect > 0.0)
        {
            return Err(FrpError::Config("anchor heights and aspect must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut c = config.input_channels;
        for &w in &config.backbone_widths {
            layers.push(Layer::Conv(Conv2d::init(c, w, 3, Activation::Relu, rng)));
            layers.push(Layer::Pool(MaxPool2d));
            c = w;
        }
        let a = config.anchors.per_cell();
        let single = |l: Layer| Sequential::new(vec![l]);
        let rpn_hidden = single(Layer::Conv(Conv2d::init(c, config.rpn_hidden, 3, Activation::Relu, rng)));
        let mut rpn_cls = Conv2d::init(config.rpn_hidden, a, 1, Activation::Identity, rng);
        rpn_cls.weight.mapv_inplace(|v| v * 0.1);
        let mut rpn_reg = Conv2d::init(config.rpn_hidden, 4 * a, 1, Activation::Identity, rng);
        rpn_reg.weight.mapv_inplace(|v| v * 0.01);
        let pooled = c * config.roi_size * config.roi_size;
        let trunk = single(Layer::Dense(Dense::init(pooled, config.head_hidden, Activation::Relu, rng)));
        let mut cls = Dense::init(config.head_hidden, 1, Activation::Sigmoid, rng);
        cls.weight.mapv_inplace(|v| v * 0.1);
        let mut reg = Dense::init(config.head_hidden, 4, Activation::Identity, rng);
        reg.weight.mapv_inplace(|v| v * 0.01);
        let weights = Self {
            backbone: Sequential::new(layers),
            rpn_hidden,
            rpn_cls: single(Layer::Conv(rpn_cls)),
            rpn_reg: single(Layer::Conv(rpn_reg)),
            trunk,
            cls: single(Layer::Dense(cls)),
            reg: single(Layer::Dense(reg)),
            anchors: config.anchors.clone(),
            roi_size: config.roi_size,
        };
        weights.validate()?;
        Ok(weights)
    }

    fn parts(&self) -> [&Sequential; 7] {
        [
            &self.backbone,
            &self.rpn_hidden,
            &self.rpn_cls,
            &self.rpn_reg,
            &self.trunk,
            &self.cls,
            &self.reg,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Sequential; 7] {
        [
            &mut self.backbone,
            &mut self.rpn_hidden,
            &mut self.rpn_cls,
            &mut self.rpn_reg,
            &mut self.trunk,
            &mut self.cls,
            &mut self.reg,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.parts_mut() {
            *p = p.zeros_like();
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.num_params()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|p| p.flat_params()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(FrpError::Shape(format!(
                "expected {} detector parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.parts_mut() {
            let n = p.num_params();
            p.set_flat_params(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &DetectorWeights) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for p in self.parts_mut() {
            p.scale(alpha);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.parts().iter().all(|p| p.all_finite())
    }

    /// Output stride of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.backbone.layers.iter().filter(|l| matches!(l, Layer::Pool(_))).count()
    }

    pub fn input_channels(&self) -> usize {
        match self.backbone.layers.first() {
            Some(Layer::Conv(c)) => c.in_channels,
            _ => 0,
        }
    }


    /// Checks that all parts chain together.
    pub fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(FrpError::Shape(m));
        let mut c = self.input_channels();
        if c == 0 {
            return shape("backbone must start with a conv layer".into());
        }
        for (i, l) in self.backbone.layers.iter().enumerate() {
            match l {
                Layer::Conv(conv) if conv.in_channels == c && conv.activation != Activation::Sigmoid => {
                    c = conv.out_channels
                }
                Layer::Pool(_) => {}
                _ => return shape(format!("backbone layer {i} does not chain")),
            }
        }
        let conv_of = |s: &Sequential| match s.layers.as_slice() {
            [Layer::Conv(conv)] => Some(conv.clone()),
            _ => None,
        };
        let dense_of = |s: &Sequential| match s.layers.as_slice() {
            [Layer::Dense(d)] => Some(d.clone()),
            _ => None,
        };
        let a = self.anchors.per_cell();
        let (Some(h), Some(rc), Some(rr)) = (
            conv_of(&self.rpn_hidden),
            conv_of(&self.rpn_cls),
            conv_of(&self.rpn_reg),
        ) else {
            return shape("proposal layer must be three single conv layers".into());
        };
        if h.in_channels != c || rc.in_channels != h.out_channels || rr.in_channels != h.out_channels {
            return shape("proposal layer channels do not chain".into());
        }
        if rc.out_channels != a || rr.out_channels != 4 * a || rc.kernel != 1 || rr.kernel != 1 {
            return shape(format!("proposal heads must be 1x1 convs with {a} and {} outputs", 4 * a));
        }
        let (Some(t), Some(cl), Some(rg)) = (dense_of(&self.trunk), dense_of(&self.cls), dense_of(&self.reg)) else {
            return shape("subnetwork must be three single dense layers".into());
        };
        if t.in_features != c * self.roi_size * self.roi_size {
            return shape(format!(
                "trunk expects {} inputs, pooled map has {}",
                t.in_features,
                c * self.roi_size * self.roi_size
            ));
        }
        if cl.in_features != t.out_features || rg.in_features != t.out_features {
            return shape("heads do not match the trunk width".into());
        }
        if cl.out_features != 1 || cl.activation != Activation::Sigmoid || rg.out_features != 4 {
            return shape("heads must produce one sigmoid score and four deltas".into());
        }
        if !self.all_finite() {
            return Err(FrpError::Data("detector parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save_records(path, DETECTOR_MAGIC, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&container::load_records(path, DETECTOR_MAGIC)?)
    }

    /// Backbone layers, the three proposal convs, the three subnetwork dense
    /// layers, then one anchor record (`filter_size` = RoI output size,
    /// params = anchor heights followed by the aspect ratio).
    pub fn to_records(&self) -> Vec<LayerRecord> {
        let mut records: Vec<LayerRecord> = self
            .parts()
            .iter()
            .flat_map(|p| p.layers.iter().map(LayerRecord::from_layer))
            .collect();
        let mut params = self.anchors.heights.clone();
        params.push(self.anchors.aspect);
        records.push(LayerRecord {
            kind: RecordKind::Anchors,
            activation: Activation::Identity,
            filter_size: self.roi_size as u32,
            stride: self.stride() as u32,
            in_channels: self.anchors.per_cell() as u32,
            out_channels: self.anchors.per_cell() as u32,
            params,
        });
        records
    }

    pub fn from_records(records: &[LayerRecord]) -> Result<Self> {
        let fmt = |m: &str| FrpError::Format(m.to_string());
        let (anchor_rec, layers) = records.split_last().ok_or_else(|| fmt("empty detector file"))?;
        if anchor_rec.kind != RecordKind::Anchors {
            return Err(fmt("detector file must end with an anchor record"));
        }
        let n_anchor = anchor_rec.in_channels as usize;
        if n_anchor == 0 || anchor_rec.params.len() != n_anchor + 1 {
            return Err(fmt("anchor record length does not match its count"));
        }
        let last_pool = layers
            .iter()
            .rposition(|r| r.kind == RecordKind::Pool)
            .ok_or_else(|| fmt("detector backbone has no pooling layer"))?;
        if layers.len() != last_pool + 1 + 6 {
            return Err(fmt("detector file must hold backbone, three proposal and three head layers"));
        }
        let to_layers = |rs: &[LayerRecord]| -> Result<Vec<Layer>> { rs.iter().map(LayerRecord::to_layer).collect() };
        let one = |i: usize| -> Result<Sequential> { Ok(Sequential::new(vec![layers[i].to_layer()?])) };
        let b = last_pool + 1;
        let weights = Self {
            backbone: Sequential::new(to_layers(&layers[..b])?),
            rpn_hidden: one(b)?,
            rpn_cls: one(b + 1)?,
            rpn_reg: one(b + 2)?,
            trunk: one(b + 3)?,
            cls: one(b + 4)?,
            reg: one(b + 5)?,
            anchors: AnchorConfig {
                heights: anchor_rec.params[..n_anchor].to_vec(),
                aspect: anchor_rec.params[n_anchor],
            },
            roi_size: anchor_rec.filter_size as usize,
        };
        weights
            .validate()
            .map_err(|e| FrpError::Format(format!("inconsistent detector layers: {e}")))?;
        Ok(weights)
    }
}

/// Runs the backbone. Image height and width must be multiples of the stride.
pub fn backbone_forward(weights: &DetectorWeights, image: &Array3<f64>) -> Result<BackboneOutput> {
    let (c, h, w) = image.dim();
    let stride = weights.stride();
    if c != weights.input_channels() {
        return Err(FrpError::Shape(format!(
            "detector expects {} channels, image has {c}",
            weights.input_channels()
        )));
    }
    if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
        return Err(FrpError::Shape(format!("image {h}x{w} is not divisible by stride {stride}")));
    }
    let (features, caches) = weights.backbone.forward_cached(image)?;
    Ok(BackboneOutput {
        features,
        stride: stride as f64,
        caches,
    })
}

pub fn rpn_forward(weights: &DetectorWeights, features: &Array3<f64>) -> Result<RpnOutput> {
    let (hidden, hidden_caches) = weights.rpn_hidden.forward_cached(features)?;
    let (logits, cls_caches) = weights.rpn_cls.forward_cached(&hidden)?;
    let (deltas, reg_caches) = weights.rpn_reg.forward_cached(&hidden)?;
    Ok(RpnOutput {
        logits,
        deltas,
        hidden_caches,
        cls_caches,
        reg_caches,
    })
}

impl RpnOutput {
    /// Objectness logit of anchor `index` (grid-major, anchor-minor).
    pub fn logit(&self, index: usize) -> f64 {
        let (a, _, w) = self.logits.dim();
        let cell = index / a;
        self.logits[(index % a, cell / w, cell % w)]
    }

    pub fn delta(&self, index: usize) -> [f64; 4] {
        let (a, _, w) = self.logits.dim();
        let cell = index / a;
        let (y, x, k) = (cell / w, cell % w, index % a);
        [0, 1, 2, 3].map(|j| self.deltas[(4 * k + j, y, x)])
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.logits.dim();
        (h, w)
    }
}

/// A proposal together with the anchor it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedProposal {
    pub proposal: Proposal,
    pub anchor_index: usize,
}

/// Scores every anchor, applies its deltas, clips to the image, drops
/// degenerate boxes, runs proposal NMS in (objectness desc, anchor index)
/// order, and returns at most `top_k` survivors in that order.
pub fn generate_proposals(
    weights: &DetectorWeights,
    rpn: &RpnOutput,
    image_size: (usize, usize),
    top_k: usize,
    config: &ProposalConfig,
) -> Result<Vec<RankedProposal>> {
    if top_k == 0 {
        return Err(FrpError::Config("top_k must be at least 1".into()));
    }
    let (gh, gw) = rpn.grid();
    let anchors = weights.anchors.generate(gh, gw, weights.stride() as f64)?;
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands: Vec<RankedProposal> = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let objectness = sigmoid(rpn.logit(i));
        let Ok(decoded) = decode(anchor, &rpn.delta(i)) else {
            continue;
        };
        let Some(clipped) = decoded.clip_to_image(iw, ih) else {
            continue;
        };
        if clipped.width() < config.min_size || clipped.height() < config.min_size {
            continue;
        }
        cands.push(RankedProposal {
            proposal: Proposal::new(clipped, objectness)?,
            anchor_index: i,
        });
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .proposal
            .objectness()
            .total_cmp(&cands[a].proposal.objectness())
            .then(cands[a].anchor_index.cmp(&cands[b].anchor_index))
    });
    let scored: Vec<ScoredBox> = cands
        .iter()
        .map(|c| ScoredBox {
            bbox: c.proposal.bbox,
            score: c.proposal.objectness(),
        })
        .collect();
    let mut kept = Vec::with_capacity(top_k);
    for i in nms_in_order(&scored, &order, config.nms_iou) {
        kept.push(cands[i]);
        if kept.len() == top_k {
            break;
        }
    }
    Ok(kept)
}

/// Subnetwork outputs for one pooled map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub score: f64,
    pub deltas: [f64; 4],
}

/// Classification score (sigmoid) and regression deltas for a pooled map.
pub fn subnetwork_forward(weights: &DetectorWeights, pooled: &Array3<f64>) -> Result<HeadOutput> {
    let hidden = weights.trunk.forward(pooled)?;
    let score = weights.cls.forward(&hidden)?[(0, 0, 0)];
    let d = weights.reg.forward(&hidden)?;
    let deltas = [0, 1, 2, 3].map(|i| d[(i, 0, 0)]);
    Ok(HeadOutput { score, deltas })
}

/// Classification score only, skipping the regression head.
pub fn subnetwork_score(weights: &DetectorWeights, pooled: &Array3<f64>) -> Result<f64> {
    let hidden = weights.trunk.forward(pooled)?;
    Ok(weights.cls.forward(&hidden)?[(0, 0, 0)])
}

/// Pools `b` from the backbone features with the detector's RoI size.
pub fn pool_box(weights: &DetectorWeights, backbone: &BackboneOutput, b: &BoundingBox) -> Result<PooledRoi> {
    roi_pool(&backbone.features, b, backbone.stride, weights.roi_size)
}

pub(crate) fn add_into(acc: &mut Array3<f64>, other: &Array3<f64>) {
    acc.zip_mut_with(other, |a, b| *a += b);
}
