use std::fs;
use std::path::Path;

use frp_core::classifier::ClassifierWeights;
use frp_core::dataset::{generate_dataset, load_annotations, save_annotations, AnnotatedImage, SceneConfig};
use frp_core::detector::{detect as run_detect, train_detector as fit_detector, DetectorTrainConfig, DetectorWeights};
use frp_core::experiment::{format_summary, format_table, run_experiment, train_seed_classifier, ExperimentConfig};
use frp_core::metrics::{format_detections, mr_fppi_curve, parse_detections, score_thresholds, ImageResult, DEFAULT_IOU_MATCH};
use frp_core::refinement::ScoredBox;
use frp_core::{BoundingBox, FrpError, Image, InferenceMode, Result};

use crate::config::RunConfig;
use crate::plot;

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FrpError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| FrpError::io(path, e))
}

fn non_empty(images: &[AnnotatedImage], dir: &Path) -> Result<()> {
    if images.is_empty() {
        return Err(FrpError::Data(format!("no images found in {}", dir.display())));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path, count: usize, prefix: &str) -> Result<()> {
    let scene = SceneConfig {
        seed: cfg.seed,
        ..cfg.experiment.scene.clone()
    };
    let images = generate_dataset(&scene, count, prefix)?;
    save_annotations(out, &images)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

pub fn train_classifier(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let images = load_annotations(data)?;
    non_empty(&images, data)?;
    let (weights, accuracy) = train_seed_classifier(&cfg.experiment, &images, cfg.seed)?;
    weights.save(out)?;
    println!(
        "classifier: {} parameters, training accuracy {accuracy:.4}, saved to {}",
        weights.num_params(),
        out.display()
    );
    Ok(())
}

pub fn train_detector(cfg: &RunConfig, data: &Path, classifier: &Path, out: &Path, tfrp: Option<bool>) -> Result<()> {
    let images = load_annotations(data)?;
    non_empty(&images, data)?;
    let scorer = ClassifierWeights::load(classifier)?;
    let train_cfg = DetectorTrainConfig {
        use_tfrp: tfrp.unwrap_or(cfg.experiment.detector_train.use_tfrp),
        ..cfg.experiment.detector_train.clone()
    };
    let e = &cfg.experiment;
    let weights = fit_detector(&images, &scorer, &e.thresholds, &e.detector, &train_cfg, cfg.seed)?;
    weights.save(out)?;
    println!(
        "detector: {} parameters, reselection {}, saved to {}",
        weights.num_params(),
        if train_cfg.use_tfrp { "on" } else { "off" },
        out.display()
    );
    Ok(())
}

/// Stands in for the classifier in modes that never call it.
fn no_classifier(_: &Image, _: &BoundingBox) -> Result<f64> {
    Err(FrpError::Config("this mode needs --classifier".into()))
}

pub fn detect(
    cfg: &RunConfig,
    weights: &Path,
    classifier: Option<&Path>,
    images_dir: &Path,
    out: &Path,
    mode: InferenceMode,
    threads: usize,
) -> Result<()> {
    let detector = DetectorWeights::load(weights)?;
    let scorer = classifier.map(ClassifierWeights::load).transpose()?;
    if mode.use_cfrp && scorer.is_none() {
        return Err(FrpError::Config(format!("mode {mode} needs --classifier")));
    }
    let images = load_annotations(images_dir)?;
    let e = &cfg.experiment;
    let run_one = |im: &AnnotatedImage| -> Result<Vec<ScoredBox>> {
        let dets = match &scorer {
            Some(s) => run_detect(&detector, s, &im.image, mode, &e.thresholds, &e.inference)?,
            None => run_detect(&detector, &no_classifier, &im.image, mode, &e.thresholds, &e.inference)?,
        };
        Ok(dets
            .iter()
            .map(|d| ScoredBox {
                bbox: d.bbox,
                score: d.score,
            })
            .collect())
    };
    let per_image = parallel_map(&images, threads, run_one)?;
    let text = format_detections(images.iter().zip(&per_image).map(|(im, d)| (im.id.as_str(), d.as_slice())));
    write(out, &text)?;
    let total: usize = per_image.iter().map(Vec::len).sum();
    println!("{total} detections over {} images ({mode}) written to {}", images.len(), out.display());
    Ok(())
}

/// Maps `f` over `items` with up to `threads` scoped workers, keeping input
/// order so the output never depends on the thread count.
fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("detection worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn eval(detections: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(detections).map_err(|e| FrpError::io(detections, e))?;
    let parsed = parse_detections(&text, &detections.display().to_string())?;
    let images = load_annotations(annotations)?;
    non_empty(&images, annotations)?;
    let mut results: Vec<ImageResult> = images
        .iter()
        .map(|im| ImageResult {
            detections: Vec::new(),
            gts: im.gts.clone(),
        })
        .collect();
    for (id, det) in parsed {
        let idx = images
            .iter()
            .position(|im| im.id == id)
            .ok_or_else(|| FrpError::Data(format!("detection for unknown image '{id}'")))?;
        results[idx].detections.push(det);
    }
    let curve = mr_fppi_curve(&results, &score_thresholds(&results), DEFAULT_IOU_MATCH)?;
    fs::create_dir_all(out).map_err(|e| FrpError::io(out, e))?;
    write(&out.join("curve.csv"), &curve.to_csv())?;
    write(&out.join("summary.txt"), &curve.summary())?;
    if let Err(e) = plot::mr_fppi(&curve, &out.join("mr_fppi.svg")) {
        log::warn!("skipping miss-rate plot: {e}");
    }
    if let Err(e) = plot::precision_recall(&curve, &out.join("pr.svg")) {
        log::warn!("skipping precision/recall plot: {e}");
    }
    print!("{}", curve.summary());
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let exp: &ExperimentConfig = &cfg.experiment;
    let results = run_experiment(exp)?;
    fs::create_dir_all(out).map_err(|e| FrpError::io(out, e))?;
    write(&out.join("table.tsv"), &format_table(&results))?;
    let summary = format_summary(&results);
    write(&out.join("summary.tsv"), &summary)?;
    for r in &results {
        for v in &r.variants {
            let name = format!("detections_{}_seed{}.txt", v.variant.name(), v.seed);
            write(&out.join(name), &v.detections_file)?;
        }
    }
    write(&out.join("config.txt"), &cfg.dump())?;
    print!("{summary}");
    Ok(())
}
