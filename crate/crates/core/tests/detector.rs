mod common;

use common::{micro_detector, micro_detector_config, random_image, random_tensor, rng, roi_pool_ref};
use frp_core::dataset::{generate_dataset, SceneConfig};
use frp_core::detector::{
    backbone_forward, decode, detect, detect_pre_nms, encode, generate_proposals, roi_pool, rpn_forward,
    subnetwork_forward, subnetwork_score, train_detector_with_report, DetectorTrainConfig, DetectorWeights,
    InferenceConfig, InferenceMode, ProposalConfig,
};
use frp_core::geometry::split_vertical;
use frp_core::refinement::{nms_indices, sfrp_decide, FrpThresholds, ScoredBox};
use frp_core::{BoundingBox, Image, ProposalScorer, Result, SfrpScores};
use ndarray::Array3;
use proptest::prelude::*;
use rand::Rng;

/// Deterministic pseudo-score of a box, spread over [0, 1].
fn hashed_score(_: &Image, b: &BoundingBox) -> Result<f64> {
    let h = b.coords().iter().fold(0u64, |acc, v| {
        acc.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(v.to_bits())
    });
    Ok((h % 1000) as f64 / 999.0)
}

fn thresholds(eps: f64, eps_s: f64, eps_c: f64) -> FrpThresholds {
    FrpThresholds {
        eps,
        eps_s,
        eps_c,
        ..FrpThresholds::default()
    }
}

#[test]
fn roi_pooling_matches_exhaustive_oracle() {
    let mut r = rng(31);
    for _ in 0..500 {
        let grid = random_tensor(&mut r, (2, 8, 8));
        let x1 = r.gen_range(-8.0..56.0);
        let y1 = r.gen_range(-8.0..56.0);
        let b = BoundingBox::new(x1, y1, x1 + r.gen_range(1.0..40.0), y1 + r.gen_range(1.0..40.0)).unwrap();
        let size = r.gen_range(1..=4);
        match roi_pool(&grid, &b, 8.0, size) {
            Ok(p) => assert_eq!(p.features, roi_pool_ref(&grid, &b, 8.0, size), "{b}"),
            Err(_) => assert!(b.x2() <= 0.0 || b.y2() <= 0.0 || b.x1() >= 64.0 || b.y1() >= 64.0),
        }
    }
}

#[test]
fn aligned_and_constant_pooling() {
    let mut r = rng(32);
    let grid = random_tensor(&mut r, (1, 8, 8));
    let full = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
    let p = roi_pool(&grid, &full, 8.0, 4).unwrap();
    for by in 0..4 {
        for bx in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for y in 2 * by..2 * by + 2 {
                for x in 2 * bx..2 * bx + 2 {
                    m = m.max(grid[(0, y, x)]);
                }
            }
            assert_eq!(p.features[(0, by, bx)], m);
        }
    }
    let flat = Array3::from_elem((3, 8, 8), 0.25);
    let b = BoundingBox::new(3.3, 7.1, 20.0, 50.5).unwrap();
    assert!(roi_pool(&flat, &b, 8.0, 4).unwrap().features.iter().all(|&v| v == 0.25));
}

#[test]
fn backbone_matches_dense_oracle() {
    let mut r = rng(33);
    let w = micro_detector(&mut r);
    let img = random_image(&mut r, 8, 8);
    let got = backbone_forward(&w, img.data()).unwrap().features;
    let want = common::forward_ref(&w.backbone, img.data());
    assert_eq!(got.dim(), (3, 2, 2));
    assert!(got.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn subnetwork_matches_dense_oracle() {
    let mut r = rng(34);
    let w = micro_detector(&mut r);
    let pooled = random_tensor(&mut r, (3, 2, 2));
    let hidden = common::forward_ref(&w.trunk, &pooled);
    let score = common::forward_ref(&w.cls, &hidden)[(0, 0, 0)];
    let deltas = common::forward_ref(&w.reg, &hidden);
    let out = subnetwork_forward(&w, &pooled).unwrap();
    assert!((out.score - score).abs() < 1e-6);
    for k in 0..4 {
        assert!((out.deltas[k] - deltas[(k, 0, 0)]).abs() < 1e-6);
    }
}

#[test]
fn zero_deltas_decode_to_the_reference() {
    let b = BoundingBox::new(3.5, 4.0, 17.25, 40.0).unwrap();
    assert_eq!(decode(&b, &[0.0; 4]).unwrap(), b);
}

proptest! {
    #[test]
    fn encode_decode_round_trip(
        x in -50.0..50.0f64, y in -50.0..50.0f64, w in 1.0..60.0f64, h in 1.0..60.0f64,
        tx in -40.0..40.0f64, ty in -40.0..40.0f64, tw in 1.0..60.0f64, th in 1.0..60.0f64,
    ) {
        let reference = BoundingBox::new(x, y, x + w, y + h).unwrap();
        let target = BoundingBox::new(tx, ty, tx + tw, ty + th).unwrap();
        let back = decode(&reference, &encode(&reference, &target)).unwrap();
        for (a, b) in back.coords().iter().zip(target.coords()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn proposals_stay_inside_the_image() {
    let mut r = rng(35);
    for _ in 0..100 {
        let w = micro_detector(&mut r);
        let img = random_image(&mut r, 16, 16);
        let feats = backbone_forward(&w, img.data()).unwrap().features;
        let rpn = rpn_forward(&w, &feats).unwrap();
        let props = generate_proposals(&w, &rpn, (16, 16), 20, &ProposalConfig::default()).unwrap();
        for p in &props {
            assert!(p.proposal.bbox.is_within(16.0, 16.0));
        }
        let one = generate_proposals(&w, &rpn, (16, 16), 1, &ProposalConfig::default()).unwrap();
        assert_eq!(one.len(), props.len().min(1));
        if let Some(first) = props.first() {
            assert_eq!(one[0], *first);
        }
    }
}

/// Straight-line composition of the module operations.
fn reference_detect<S: ProposalScorer>(
    w: &DetectorWeights,
    scorer: &S,
    image: &Image,
    mode: InferenceMode,
    t: &FrpThresholds,
    cfg: &InferenceConfig,
) -> Vec<(BoundingBox, f64)> {
    let (_, ih, iw) = image.data().dim();
    let backbone = backbone_forward(w, image.data()).unwrap();
    let rpn = rpn_forward(w, &backbone.features).unwrap();
    let proposals = generate_proposals(w, &rpn, (ih, iw), cfg.top_k, &cfg.proposal).unwrap();
    let mut survivors = Vec::new();
    for rp in proposals {
        let b = rp.proposal.bbox;
        if mode.use_cfrp && t.eps_c > 0.0 && scorer.score(image, &b).unwrap() < t.eps_c {
            continue;
        }
        let pool = |x: &BoundingBox| roi_pool(&backbone.features, x, backbone.stride, w.roi_size).unwrap().features;
        let head = subnetwork_forward(w, &pool(&b)).unwrap();
        let keep = if mode.use_sfrp {
            let (l, r) = split_vertical(&b);
            let s = SfrpScores::new(
                head.score,
                subnetwork_score(w, &pool(&l)).unwrap(),
                subnetwork_score(w, &pool(&r)).unwrap(),
            )
            .unwrap();
            sfrp_decide(&s, t.eps, t.eps_s)
        } else {
            head.score >= t.eps
        };
        if !keep {
            continue;
        }
        if let Some(c) = decode(&b, &head.deltas).unwrap().clip_to_image(iw as f64, ih as f64) {
            survivors.push(ScoredBox { bbox: c, score: head.score });
        }
    }
    nms_indices(&survivors, cfg.nms_iou)
        .into_iter()
        .map(|i| (survivors[i].bbox, survivors[i].score))
        .collect()
}

#[test]
fn detect_matches_straight_line_composition() {
    let mut r = rng(36);
    let cfg = InferenceConfig::default();
    for _ in 0..10 {
        let w = micro_detector(&mut r);
        let img = random_image(&mut r, 24, 24);
        let t = thresholds(r.gen_range(0.2..0.6), r.gen_range(0.0..0.5), r.gen_range(0.0..0.6));
        for mode in [InferenceMode::BASELINE, InferenceMode::COMPACT, InferenceMode::FULL] {
            let got: Vec<(BoundingBox, f64)> = detect(&w, &hashed_score, &img, mode, &t, &cfg)
                .unwrap()
                .iter()
                .map(|d| (d.bbox, d.score))
                .collect();
            assert_eq!(got, reference_detect(&w, &hashed_score, &img, mode, &t, &cfg), "{mode}");
        }
    }
}

#[test]
fn mode_subsets_hold_before_nms() {
    let mut r = rng(37);
    let cfg = InferenceConfig::default();
    for _ in 0..20 {
        let w = micro_detector(&mut r);
        let img = random_image(&mut r, 24, 24);
        let t = thresholds(0.4, 0.3, 0.5);
        let run = |m| detect_pre_nms(&w, &hashed_score, &img, m, &t, &cfg).unwrap();
        let (base, compact, full) = (run(InferenceMode::BASELINE), run(InferenceMode::COMPACT), run(InferenceMode::FULL));
        let key = |d: &frp_core::Detection| (d.proposal_index, d.bbox, d.score);
        for d in &compact {
            assert!(base.iter().any(|b| key(b) == key(d)));
        }
        for d in &full {
            assert!(compact.iter().any(|c| key(c) == key(d)));
        }
    }
}

#[test]
fn degenerate_thresholds_make_modes_agree() {
    let mut r = rng(38);
    let cfg = InferenceConfig::default();
    let t = thresholds(0.5, 0.0, 0.0);
    for _ in 0..10 {
        let w = micro_detector(&mut r);
        let img = random_image(&mut r, 24, 24);
        let boxes = |m| -> Vec<(BoundingBox, f64)> {
            detect(&w, &hashed_score, &img, m, &t, &cfg).unwrap().iter().map(|d| (d.bbox, d.score)).collect()
        };
        let base = boxes(InferenceMode::BASELINE);
        assert_eq!(base, boxes(InferenceMode::COMPACT));
        assert_eq!(base, boxes(InferenceMode::FULL));
    }
}

#[test]
fn detections_are_sorted_and_inside_the_image() {
    let mut r = rng(39);
    let w = micro_detector(&mut r);
    let img = random_image(&mut r, 24, 24);
    let t = thresholds(0.0, 0.0, 0.0);
    let dets = detect(&w, &hashed_score, &img, InferenceMode::FULL, &t, &InferenceConfig::default()).unwrap();
    for pair in dets.windows(2) {
        assert!(pair[0].score >= pair[1].score);
    }
    assert!(dets.iter().all(|d| d.bbox.is_within(24.0, 24.0)));
    let again = detect(&w, &hashed_score, &img, InferenceMode::FULL, &t, &InferenceConfig::default()).unwrap();
    assert_eq!(dets, again);
}

fn small_scenes(n: usize) -> Vec<frp_core::AnnotatedImage> {
    let scene = SceneConfig {
        width: 48,
        height: 48,
        pedestrian_height: (16.0, 24.0),
        pedestrians: (1, 2),
        distractors: (1, 2),
        seed: 5,
        ..SceneConfig::default()
    };
    generate_dataset(&scene, n, "s").unwrap()
}

fn small_train_config(epochs: usize, use_tfrp: bool) -> DetectorTrainConfig {
    DetectorTrainConfig {
        epochs,
        use_tfrp,
        train_top_k: 16,
        rpn_batch: 16,
        roi_batch: 16,
        ..DetectorTrainConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let data = small_scenes(2);
    let arch = micro_detector_config();
    let zero = |_: &Image, _: &BoundingBox| -> Result<f64> { Ok(0.0) };
    let (w, report) =
        train_detector_with_report(&data, &zero, &FrpThresholds::default(), &arch, &small_train_config(0, true), 4)
            .unwrap();
    assert_eq!(w, DetectorWeights::init(&arch, 4).unwrap());
    assert_eq!(report.steps, 0);
}

#[test]
fn reselection_that_never_fires_matches_the_baseline() {
    let data = small_scenes(4);
    let arch = micro_detector_config();
    let t = FrpThresholds::default();
    let zero = |_: &Image, _: &BoundingBox| -> Result<f64> { Ok(0.0) };
    let high = |_: &Image, _: &BoundingBox| -> Result<f64> { Ok(0.99) };
    let base = train_detector_with_report(&data, &zero, &t, &arch, &small_train_config(2, false), 9).unwrap();
    let quiet = train_detector_with_report(&data, &zero, &t, &arch, &small_train_config(2, true), 9).unwrap();
    assert_eq!(base.0, quiet.0);
    assert_eq!(base.1.epoch_losses, quiet.1.epoch_losses);
    let t1 = FrpThresholds { eps_t: 1.0, ..t };
    let vacuous = train_detector_with_report(&data, &high, &t1, &arch, &small_train_config(2, true), 9).unwrap();
    assert_eq!(base.0, vacuous.0);
    let active = train_detector_with_report(&data, &high, &t, &arch, &small_train_config(2, true), 9).unwrap();
    assert!(active.1.removed_negatives > 0);
    assert_ne!(base.0, active.0);
}

#[test]
fn training_lowers_the_loss() {
    let data = small_scenes(12);
    let zero = |_: &Image, _: &BoundingBox| -> Result<f64> { Ok(0.0) };
    for seed in 1..=3 {
        let (_, report) = train_detector_with_report(
            &data,
            &zero,
            &FrpThresholds::default(),
            &micro_detector_config(),
            &small_train_config(6, false),
            seed,
        )
        .unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "seed {seed}: {:?}", report.epoch_losses);
    }
}

#[test]
fn weights_round_trip_through_a_file() {
    let mut r = rng(40);
    let w = micro_detector(&mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.frpd");
    w.save(&path).unwrap();
    assert_eq!(DetectorWeights::load(&path).unwrap(), w);
    std::fs::write(dir.path().join("bad.frpd"), b"FRPCxxxx").unwrap();
    assert!(DetectorWeights::load(&dir.path().join("bad.frpd")).is_err());
}
