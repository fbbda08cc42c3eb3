//! Detector training with optional negative reselection.
//!
//! Per image and step: backbone, proposals, IoU assignment, reselection of
//! the negatives by the patch classifier, merge into the training set,
//! balanced sampling, then one momentum-SGD step on
//! `rpn_bce + rpn_smooth_l1 + head_bce + head_smooth_l1`.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    add_into, backbone_forward, encode, generate_proposals, pool_box, rpn_forward, DetectorConfig,
    DetectorWeights, PooledRoi, ProposalConfig,
};
use crate::dataset::AnnotatedImage;
use crate::error::{FrpError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::nn::{bce_with_logit, smooth_l1};
use crate::refinement::{
    assign_by_iou, tfrp_refine, tfrp_training_set, FrpThresholds, Proposal, ProposalScorer,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Proposals drawn from the proposal layer per training image.
    pub train_top_k: usize,
    /// Anchors sampled per image for the proposal-layer loss (at most half positive).
    pub rpn_batch: usize,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    /// Proposals sampled per image for the subnetwork loss.
    pub roi_batch: usize,
    /// Cap on the positive share of the subnetwork batch (1:3 by default).
    pub roi_positive_fraction: f64,
    /// Reselect negatives with the patch classifier; off gives the baseline.
    pub use_tfrp: bool,
    /// Add ground-truth boxes to the proposal set.
    pub include_gt_proposals: bool,
    /// Gradient L2-norm clip; non-positive disables clipping.
    pub max_grad_norm: f64,
    pub proposal: ProposalConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 8,
            train_top_k: 48,
            rpn_batch: 64,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.3,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            use_tfrp: true,
            include_gt_proposals: true,
            max_grad_norm: 10.0,
            proposal: ProposalConfig::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FrpError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("detector learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.train_top_k == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("train_top_k, rpn_batch and roi_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.roi_positive_fraction) {
            return bad("roi_positive_fraction must lie in [0, 1]");
        }
        if !(self.rpn_negative_iou <= self.rpn_positive_iou && self.rpn_positive_iou <= 1.0) {
            return bad("rpn IoU thresholds must satisfy negative <= positive <= 1");
        }
        Ok(())
    }
}

/// Anchor and proposal samples of one image with their labels and
/// regression targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTargets {
    /// `(anchor index, positive, target deltas for positives)`
    pub anchors: Vec<(usize, bool, Option<[f64; 4]>)>,
    /// `(proposal box, positive, target deltas for positives)`
    pub rois: Vec<(BoundingBox, bool, Option<[f64; 4]>)>,
    /// Negatives removed by reselection.
    pub removed_negatives: usize,
}

fn best_gt(b: &BoundingBox, gts: &[BoundingBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

fn take_random<T: Clone>(items: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    let n = n.min(v.len());
    let (chosen, _) = v.partial_shuffle(rng, n);
    chosen.to_vec()
}

/// Builds the training samples of one image under the current weights.
#[allow(clippy::too_many_arguments)]
pub fn sample_image_targets<S: ProposalScorer + ?Sized>(
    weights: &DetectorWeights,
    sample: &AnnotatedImage,
    scorer: &S,
    thresholds: &FrpThresholds,
    config: &DetectorTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTargets> {
    let image = sample.image.data();
    let (_, ih, iw) = image.dim();
    let gts = &sample.gts;
    let backbone = backbone_forward(weights, image)?;
    let rpn = rpn_forward(weights, &backbone.features)?;
    let (gh, gw) = rpn.grid();
    let anchors = weights.anchors.generate(gh, gw, backbone.stride)?;

    // proposal-layer samples
    let mut best_anchor_for_gt: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    let mut anchor_best: Vec<Option<(usize, f64)>> = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let best = best_gt(a, gts);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > 0.0 && best_anchor_for_gt[gi].is_none_or(|(_, bv)| v > bv) {
                best_anchor_for_gt[gi] = Some((ai, v));
            }
        }
        anchor_best.push(best);
    }
    let mut anchor_pos = Vec::new();
    let mut anchor_neg = Vec::new();
    for (ai, best) in anchor_best.iter().enumerate() {
        let forced = best_anchor_for_gt.iter().any(|b| b.map(|(i, _)| i) == Some(ai));
        match best {
            Some((gi, v)) if *v >= config.rpn_positive_iou || forced => {
                anchor_pos.push((ai, true, Some(encode(&anchors[ai], &gts[*gi]))))
            }
            Some((_, v)) if *v >= config.rpn_negative_iou => {}
            _ => anchor_neg.push((ai, false, None)),
        }
    }
    let n_pos = anchor_pos.len().min(config.rpn_batch / 2);
    let mut anchor_samples = take_random(&anchor_pos, n_pos, rng);
    let n_neg = config.rpn_batch - anchor_samples.len();
    anchor_samples.extend(take_random(&anchor_neg, n_neg, rng));

    // subnetwork samples
    let mut proposals: Vec<Proposal> = generate_proposals(weights, &rpn, (ih, iw), config.train_top_k, &config.proposal)?
        .into_iter()
        .map(|r| r.proposal)
        .collect();
    if config.include_gt_proposals {
        for g in gts {
            proposals.push(Proposal::new(*g, 1.0)?);
        }
    }
    let assignment = assign_by_iou(&proposals, gts, thresholds.eps_iou);
    let refined = if config.use_tfrp {
        tfrp_refine(&assignment.negatives, scorer, &sample.image, thresholds.eps_t)
    } else {
        assignment.negatives.clone()
    };
    let removed_negatives = assignment.negatives.len() - refined.len();
    let training = tfrp_training_set(&assignment.positives, &refined)?;
    let positives: Vec<BoundingBox> = training.iter().filter(|l| l.positive).map(|l| l.proposal.bbox).collect();
    let negatives: Vec<BoundingBox> = training.iter().filter(|l| !l.positive).map(|l| l.proposal.bbox).collect();
    let cap = (config.roi_batch as f64 * config.roi_positive_fraction).round() as usize;
    let chosen_pos = take_random(&positives, cap, rng);
    let chosen_neg = take_random(&negatives, config.roi_batch - chosen_pos.len(), rng);
    let mut rois = Vec::with_capacity(chosen_pos.len() + chosen_neg.len());
    for b in chosen_pos {
        let (gi, _) = best_gt(&b, gts).expect("positives imply a ground truth");
        rois.push((b, true, Some(encode(&b, &gts[gi]))));
    }
    for b in chosen_neg {
        rois.push((b, false, None));
    }
    Ok(ImageTargets {
        anchors: anchor_samples,
        rois,
        removed_negatives,
    })
}

/// One subnetwork training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    pub pooled: Array3<f64>,
    pub positive: bool,
    pub target: Option<[f64; 4]>,
}

/// Subnetwork loss `mean(bce) + sum_positive(smooth_l1) / n` over `samples`.
/// Returns the loss, the parameter gradients (only the trunk and heads are
/// non-zero), and the gradient with respect to each pooled input.
pub fn head_loss_and_gradient(
    weights: &DetectorWeights,
    samples: &[HeadSample],
) -> Result<(f64, DetectorWeights, Vec<Array3<f64>>)> {
    let mut grads = weights.zeros_like();
    let mut dpooled = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return Ok((0.0, grads, dpooled));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let (hidden, trunk_caches) = weights.trunk.forward_cached(&s.pooled)?;
        let (logit, cls_caches) = weights.cls.forward_cached(&hidden)?;
        let label = if s.positive { 1.0 } else { 0.0 };
        let (l, dlogit) = bce_with_logit(logit[(0, 0, 0)], label);
        loss += l * scale;
        let mut dhidden = weights
            .cls
            .backward(&cls_caches, &Array3::from_elem((1, 1, 1), dlogit * scale), &mut grads.cls, true)
            .expect("input gradient requested");
        if let (true, Some(target)) = (s.positive, s.target) {
            let (deltas, reg_caches) = weights.reg.forward_cached(&hidden)?;
            let mut dd = Array3::zeros((4, 1, 1));
            for k in 0..4 {
                let (l, d) = smooth_l1(deltas[(k, 0, 0)] - target[k]);
                loss += l * scale;
                dd[(k, 0, 0)] = d * scale;
            }
            let dh = weights
                .reg
                .backward(&reg_caches, &dd, &mut grads.reg, true)
                .expect("input gradient requested");
            add_into(&mut dhidden, &dh);
        }
        let dp = weights
            .trunk
            .backward(&trunk_caches, &dhidden, &mut grads.trunk, true)
            .expect("input gradient requested");
        dpooled.push(dp);
    }
    Ok((loss, grads, dpooled))
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub head: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn + self.head
    }
}

/// Full per-image loss and gradient for fixed samples.
pub fn detector_loss_and_gradient(
    weights: &DetectorWeights,
    image: &Array3<f64>,
    targets: &ImageTargets,
) -> Result<(LossBreakdown, DetectorWeights)> {
    let backbone = backbone_forward(weights, image)?;
    let rpn = rpn_forward(weights, &backbone.features)?;
    let mut grads = weights.zeros_like();
    let mut breakdown = LossBreakdown::default();

    // proposal layer
    let mut dlogits = Array3::<f64>::zeros(rpn.logits.dim());
    let mut ddeltas = Array3::<f64>::zeros(rpn.deltas.dim());
    if !targets.anchors.is_empty() {
        let (a, _, w) = rpn.logits.dim();
        let scale = 1.0 / targets.anchors.len() as f64;
        for &(ai, positive, target) in &targets.anchors {
            let cell = ai / a;
            let (y, x, k) = (cell / w, cell % w, ai % a);
            let (l, d) = bce_with_logit(rpn.logits[(k, y, x)], if positive { 1.0 } else { 0.0 });
            breakdown.rpn += l * scale;
            dlogits[(k, y, x)] += d * scale;
            if let (true, Some(t)) = (positive, target) {
                for j in 0..4 {
                    let (l, d) = smooth_l1(rpn.deltas[(4 * k + j, y, x)] - t[j]);
                    breakdown.rpn += l * scale;
                    ddeltas[(4 * k + j, y, x)] += d * scale;
                }
            }
        }
    }
    let mut dhidden = weights
        .rpn_cls
        .backward(&rpn.cls_caches, &dlogits, &mut grads.rpn_cls, true)
        .expect("input gradient requested");
    let dh2 = weights
        .rpn_reg
        .backward(&rpn.reg_caches, &ddeltas, &mut grads.rpn_reg, true)
        .expect("input gradient requested");
    add_into(&mut dhidden, &dh2);
    let mut dfeatures = weights
        .rpn_hidden
        .backward(&rpn.hidden_caches, &dhidden, &mut grads.rpn_hidden, true)
        .expect("input gradient requested");

    // subnetwork
    let pooled: Vec<PooledRoi> = targets
        .rois
        .iter()
        .map(|(b, _, _)| pool_box(weights, &backbone, b))
        .collect::<Result<_>>()?;
    let samples: Vec<HeadSample> = pooled
        .iter()
        .zip(&targets.rois)
        .map(|(p, &(_, positive, target))| HeadSample {
            pooled: p.features.clone(),
            positive,
            target,
        })
        .collect();
    let (head_loss, head_grads, dpooled) = head_loss_and_gradient(weights, &samples)?;
    breakdown.head = head_loss;
    grads.add_scaled(1.0, &head_grads);
    for (p, d) in pooled.iter().zip(&dpooled) {
        super::roi_pool_backward(p, d, &mut dfeatures);
    }

    weights
        .backbone
        .backward(&backbone.caches, &dfeatures, &mut grads.backbone, false);
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectorTrainingReport {
    /// Mean total loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Total negatives dropped by reselection over the whole run.
    pub removed_negatives: usize,
    pub steps: usize,
}

pub fn train_detector<S: ProposalScorer + ?Sized>(
    dataset: &[AnnotatedImage],
    scorer: &S,
    thresholds: &FrpThresholds,
    architecture: &DetectorConfig,
    config: &DetectorTrainConfig,
    seed: u64,
) -> Result<DetectorWeights> {
    train_detector_with_report(dataset, scorer, thresholds, architecture, config, seed).map(|(w, _)| w)
}

/// One momentum-SGD step per image, images visited in a seeded shuffle each
/// epoch. The result is a pure function of the inputs and the seed.
pub fn train_detector_with_report<S: ProposalScorer + ?Sized>(
    dataset: &[AnnotatedImage],
    scorer: &S,
    thresholds: &FrpThresholds,
    architecture: &DetectorConfig,
    config: &DetectorTrainConfig,
    seed: u64,
) -> Result<(DetectorWeights, DetectorTrainingReport)> {
    if dataset.is_empty() {
        return Err(FrpError::Data("detector training needs at least one image".into()));
    }
    thresholds.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = DetectorWeights::init_with_rng(architecture, &mut rng)?;
    let mut velocity = weights.zeros_like();
    let mut report = DetectorTrainingReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &idx in &order {
            let sample = &dataset[idx];
            let targets = sample_image_targets(&weights, sample, scorer, thresholds, config, &mut rng)?;
            report.removed_negatives += targets.removed_negatives;
            let (loss, mut grads) = detector_loss_and_gradient(&weights, sample.image.data(), &targets)?;
            let total = loss.total();
            if !total.is_finite() {
                return Err(FrpError::Training {
                    stage: "step",
                    index: report.steps,
                });
            }
            if config.max_grad_norm > 0.0 {
                let norm = grads.flat_params().iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > config.max_grad_norm {
                    grads.scale(config.max_grad_norm / norm);
                }
            }
            velocity.scale(config.momentum);
            velocity.add_scaled(1.0, &grads);
            weights.add_scaled(-config.learning_rate, &velocity);
            if !weights.all_finite() {
                return Err(FrpError::Training {
                    stage: "step",
                    index: report.steps,
                });
            }
            sum += total;
            report.steps += 1;
        }
        let mean = sum / dataset.len() as f64;
        log::debug!("detector epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok((weights, report))
}
