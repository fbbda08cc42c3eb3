//! Synthetic ablation benchmark: trains a baseline detector and a
//! reselection-trained detector per seed, evaluates the baseline, compact
//! (split gate only) and full (classifier filter + split gate) variants, and
//! times every mode on the same images.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{train_classifier_with_report, ArchitectureConfig, ClassifierTrainConfig, ClassifierWeights};
use crate::dataset::{build_patch_dataset, generate_dataset, into_labeled, AnnotatedImage, SceneConfig};
use crate::detector::{
    detect, train_detector_with_report, Detection, DetectorConfig, DetectorTrainConfig, DetectorWeights,
    InferenceConfig, InferenceMode,
};
use crate::error::Result;
use crate::metrics::{format_detections, mr_fppi_curve, score_thresholds, EvalCurve, ImageResult, DEFAULT_IOU_MATCH};
use crate::refinement::{FrpThresholds, ScoredBox};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub scene: SceneConfig,
    pub seeds: Vec<u64>,
    /// Random negative patches per training image for the classifier.
    pub negatives_per_image: usize,
    pub classifier: ClassifierTrainConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub thresholds: FrpThresholds,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 100,
            scene: SceneConfig::default(),
            seeds: vec![1, 2, 3],
            negatives_per_image: 6,
            // narrower than the standalone default so three seeds fit the
            // runtime budget on one core; shifted patches keep the filter
            // tolerant of imperfect proposals
            classifier: ClassifierTrainConfig {
                max_shift: 12,
                architecture: ArchitectureConfig {
                    widths: vec![8, 16, 32, 64],
                    ..ArchitectureConfig::default()
                },
                ..ClassifierTrainConfig::default()
            },
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            thresholds: FrpThresholds::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Compact,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Compact, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Compact => "compact",
            Variant::Full => "full",
        }
    }

    pub fn mode(&self) -> InferenceMode {
        match self {
            Variant::Baseline => InferenceMode::BASELINE,
            Variant::Compact => InferenceMode::COMPACT,
            Variant::Full => InferenceMode::FULL,
        }
    }

    /// Whether the variant's detector was trained with negative reselection.
    pub fn reselection_trained(&self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub log_average_miss_rate: f64,
    /// FPPI over all emitted detections (the default score threshold).
    pub fppi: f64,
    pub recall: f64,
    /// Parameters used at test time; the full variant adds the classifier.
    pub params: usize,
    pub ms_per_frame: f64,
    pub curve: EvalCurve,
    /// Detections in the `image_id score x1 y1 x2 y2` file format.
    pub detections_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
    /// Reselection-trained weights run in baseline mode.
    pub reselection_baseline_ms: f64,
    pub classifier_accuracy: f64,
    pub removed_negatives: usize,
    pub baseline_losses: Vec<f64>,
    pub reselection_losses: Vec<f64>,
}

impl SeedResult {
    pub fn variant(&self, v: Variant) -> &VariantResult {
        self.variants.iter().find(|r| r.variant == v).expect("every variant is evaluated")
    }
}

/// Scene seeds for seed `s`: training scenes start at `s * 10^7`, test
/// scenes at `s * 10^7 + 5 * 10^6`, so the two sets never share a scene.
pub fn split_datasets(config: &ExperimentConfig, seed: u64) -> Result<(Vec<AnnotatedImage>, Vec<AnnotatedImage>)> {
    let base = seed.wrapping_mul(10_000_000);
    let train_cfg = SceneConfig {
        seed: base,
        ..config.scene.clone()
    };
    let test_cfg = SceneConfig {
        seed: base + 5_000_000,
        ..config.scene.clone()
    };
    Ok((
        generate_dataset(&train_cfg, config.train_images, "train")?,
        generate_dataset(&test_cfg, config.test_images, "test")?,
    ))
}

pub fn train_seed_classifier(
    config: &ExperimentConfig,
    train: &[AnnotatedImage],
    seed: u64,
) -> Result<(ClassifierWeights, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let patches = into_labeled(build_patch_dataset(train, config.negatives_per_image, &mut rng)?);
    let (weights, report) = train_classifier_with_report(&patches, &config.classifier, seed)?;
    Ok((weights, report.train_accuracy))
}

fn to_scored(dets: &[Detection]) -> Vec<ScoredBox> {
    dets.iter()
        .map(|d| ScoredBox {
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Detections and per-image wall times for the four timed runs
/// (baseline, compact, full, reselection-trained baseline), interleaved per
/// image after one untimed warm-up pass.
fn evaluate_modes(
    config: &ExperimentConfig,
    baseline: &DetectorWeights,
    reselection: &DetectorWeights,
    classifier: &ClassifierWeights,
    test: &[AnnotatedImage],
) -> Result<(Vec<Vec<Vec<Detection>>>, Vec<f64>)> {
    let runs: [(&DetectorWeights, InferenceMode); 4] = [
        (baseline, InferenceMode::BASELINE),
        (reselection, InferenceMode::COMPACT),
        (reselection, InferenceMode::FULL),
        (reselection, InferenceMode::BASELINE),
    ];
    let th = &config.thresholds;
    let inf = &config.inference;
    for im in test {
        for (w, mode) in runs {
            detect(w, classifier, &im.image, mode, th, inf)?;
        }
    }
    let mut dets = vec![Vec::with_capacity(test.len()); runs.len()];
    let mut times = vec![Vec::with_capacity(test.len()); runs.len()];
    for im in test {
        for (r, (w, mode)) in runs.iter().enumerate() {
            let start = Instant::now();
            let d = detect(*w, classifier, &im.image, *mode, th, inf)?;
            times[r].push(start.elapsed().as_secs_f64() * 1e3);
            dets[r].push(d);
        }
    }
    Ok((dets, times.iter_mut().map(|t| median(t)).collect()))
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let (train, test) = split_datasets(config, seed)?;
    let (classifier, classifier_accuracy) = train_seed_classifier(config, &train, seed)?;
    log::info!("seed {seed}: classifier train accuracy {classifier_accuracy:.3}");

    let off = DetectorTrainConfig {
        use_tfrp: false,
        ..config.detector_train.clone()
    };
    let on = DetectorTrainConfig {
        use_tfrp: true,
        ..config.detector_train.clone()
    };
    let (baseline, base_report) =
        train_detector_with_report(&train, &classifier, &config.thresholds, &config.detector, &off, seed)?;
    let (reselection, res_report) =
        train_detector_with_report(&train, &classifier, &config.thresholds, &config.detector, &on, seed)?;
    log::info!(
        "seed {seed}: reselection dropped {} negatives over {} steps",
        res_report.removed_negatives,
        res_report.steps
    );

    let (dets, times) = evaluate_modes(config, &baseline, &reselection, &classifier, &test)?;
    let mut variants = Vec::with_capacity(3);
    for (r, variant) in Variant::ALL.iter().enumerate() {
        let scored: Vec<Vec<ScoredBox>> = dets[r].iter().map(|d| to_scored(d)).collect();
        let results: Vec<ImageResult> = scored
            .iter()
            .zip(&test)
            .map(|(d, im)| ImageResult {
                detections: d.clone(),
                gts: im.gts.clone(),
            })
            .collect();
        let curve = mr_fppi_curve(&results, &score_thresholds(&results), DEFAULT_IOU_MATCH)?;
        let lowest = curve.points[0];
        let params = match variant {
            Variant::Baseline => baseline.num_params(),
            Variant::Compact => reselection.num_params(),
            Variant::Full => reselection.num_params() + classifier.num_params(),
        };
        let detections_file = format_detections(test.iter().zip(&scored).map(|(im, d)| (im.id.as_str(), d.as_slice())));
        variants.push(VariantResult {
            variant: *variant,
            seed,
            log_average_miss_rate: curve.log_average_miss_rate,
            fppi: lowest.fppi,
            recall: lowest.recall,
            params,
            ms_per_frame: times[r],
            curve,
            detections_file,
        });
    }
    Ok(SeedResult {
        seed,
        variants,
        reselection_baseline_ms: times[3],
        classifier_accuracy,
        removed_negatives: res_report.removed_negatives,
        baseline_losses: base_report.epoch_losses,
        reselection_losses: res_report.epoch_losses,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    config.scene.validate()?;
    config.thresholds.validate()?;
    config.detector_train.validate()?;
    config.seeds.iter().map(|&s| run_seed(config, s)).collect()
}

/// Median of `f` over seeds for one variant.
pub fn median_over_seeds(results: &[SeedResult], variant: Variant, f: impl Fn(&VariantResult) -> f64) -> f64 {
    let mut v: Vec<f64> = results.iter().map(|r| f(r.variant(variant))).collect();
    median(&mut v)
}

/// Tab-separated table, one row per variant and seed.
pub fn format_table(results: &[SeedResult]) -> String {
    let mut s = String::from("variant\tseed\tmr\tfppi\trecall\tparams\tms_per_frame\n");
    for r in results {
        for v in &r.variants {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.3}\n",
                v.variant.name(),
                v.seed,
                v.log_average_miss_rate,
                v.fppi,
                v.recall,
                v.params,
                v.ms_per_frame
            ));
        }
    }
    s
}

/// Median summary per variant.
pub fn format_summary(results: &[SeedResult]) -> String {
    let mut s = String::from("variant\tmedian_mr\tmedian_fppi\tparams\tmedian_ms_per_frame\n");
    for v in Variant::ALL {
        let params = results.first().map(|r| r.variant(v).params).unwrap_or(0);
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.3}\n",
            v.name(),
            median_over_seeds(results, v, |r| r.log_average_miss_rate),
            median_over_seeds(results, v, |r| r.fppi),
            params,
            median_over_seeds(results, v, |r| r.ms_per_frame),
        ));
    }
    s
}
