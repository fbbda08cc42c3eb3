use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use frp_core::classifier::{extract_patch, ArchitectureConfig, ClassifierWeights};
use frp_core::dataset::{generate_dataset, SceneConfig};
use frp_core::detector::{detect, roi_pool, DetectorConfig, DetectorWeights, InferenceConfig, InferenceMode};
use frp_core::geometry::iou;
use frp_core::refinement::{nms, FrpThresholds, ScoredBox};
use frp_core::BoundingBox;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_boxes(n: usize, seed: u64) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0));
            BoundingBox::new(x, y, x + rng.gen_range(4.0..30.0), y + rng.gen_range(8.0..40.0)).unwrap()
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let boxes = random_boxes(1000, 1);
    c.bench_function("iou_1000_pairs", |b| {
        b.iter(|| boxes.iter().zip(boxes.iter().rev()).map(|(a, b)| iou(a, b)).sum::<f64>())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dets: Vec<ScoredBox> = random_boxes(300, 3)
        .into_iter()
        .map(|bbox| ScoredBox {
            bbox,
            score: rng.gen(),
        })
        .collect();
    c.bench_function("nms_300", |b| b.iter(|| nms(black_box(&dets), 0.5)));
}

fn pooling(c: &mut Criterion) {
    let features = Array3::from_shape_fn((32, 12, 12), |(c, y, x)| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0);
    let boxes = random_boxes(50, 4);
    c.bench_function("roi_pool_50_boxes", |b| {
        b.iter(|| {
            for bx in &boxes {
                black_box(roi_pool(&features, bx, 8.0, 4).unwrap());
            }
        })
    });
}

fn classifier(c: &mut Criterion) {
    let scene = generate_dataset(&SceneConfig::default(), 1, "b").unwrap().remove(0);
    let patch = extract_patch(&scene.image, &BoundingBox::new(10.0, 10.0, 30.0, 60.0).unwrap()).unwrap();
    let mut group = c.benchmark_group("classifier_forward");
    for widths in [vec![8, 16, 32, 64], ArchitectureConfig::default().widths] {
        let arch = ArchitectureConfig {
            widths: widths.clone(),
            ..ArchitectureConfig::default()
        };
        let w = ClassifierWeights::init(&arch, 0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{widths:?}")), &patch, |b, p| {
            b.iter(|| w.forward(p).unwrap())
        });
    }
    group.finish();
}

fn detection(c: &mut Criterion) {
    let scene = generate_dataset(&SceneConfig::default(), 1, "d").unwrap().remove(0);
    let det = DetectorWeights::init(&DetectorConfig::default(), 0).unwrap();
    let arch = ArchitectureConfig {
        widths: vec![8, 16, 32, 64],
        ..ArchitectureConfig::default()
    };
    let clf = ClassifierWeights::init(&arch, 0).unwrap();
    // everything passes the filter and the gate, so each mode does its full work
    let th = FrpThresholds {
        eps_c: 0.0,
        eps_s: 0.0,
        ..FrpThresholds::default()
    };
    let inf = InferenceConfig::default();
    let mut group = c.benchmark_group("detect");
    group.sample_size(20);
    for mode in [InferenceMode::BASELINE, InferenceMode::COMPACT, InferenceMode::FULL] {
        group.bench_function(mode.name(), |b| b.iter(|| detect(&det, &clf, &scene.image, mode, &th, &inf).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, geometry, pooling, classifier, detection);
criterion_main!(benches);
