mod common;

use common::iou_ref;
use frp_core::dataset::{
    build_patch_dataset, generate_dataset, generate_scene, load_annotations, parse_annotation, save_annotations,
    SceneConfig, NEGATIVE_MAX_IOU,
};
use frp_core::AnnotatedImage;

fn scene(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn empty_scene_has_no_ground_truth() {
    let cfg = SceneConfig {
        pedestrians: (0, 0),
        distractors: (0, 0),
        ..scene(1)
    };
    let im = generate_scene(&cfg, "e", &mut common::rng(1)).unwrap();
    assert!(im.gts.is_empty());
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&scene(7), 5, "x").unwrap();
    let b = generate_dataset(&scene(7), 5, "x").unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&scene(8), 5, "x").unwrap();
    assert_ne!(a, c);
}

#[test]
fn thousand_scenes_keep_boxes_inside_and_apart() {
    let cfg = scene(123);
    let images = generate_dataset(&cfg, 1000, "p").unwrap();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for im in &images {
        for (i, a) in im.gts.iter().enumerate() {
            assert!(a.x1() >= 0.0 && a.y1() >= 0.0 && a.x2() <= w && a.y2() <= h, "{}: {a}", im.id);
            for b in &im.gts[i + 1..] {
                assert!(iou_ref(a, b) <= 0.3, "{}: {a} vs {b}", im.id);
            }
        }
        assert!(im.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn patch_sampling_counts_and_overlaps() {
    let images = generate_dataset(&scene(3), 20, "q").unwrap();
    let samples = build_patch_dataset(&images, 3, &mut common::rng(4)).unwrap();
    for (idx, im) in images.iter().enumerate() {
        let mine: Vec<_> = samples.iter().filter(|s| s.image_index == idx).collect();
        let pos: Vec<_> = mine.iter().filter(|s| s.labeled.positive).collect();
        assert_eq!(pos.len(), im.gts.len());
        assert!(mine.len() - pos.len() <= 3);
        for (s, g) in pos.iter().zip(&im.gts) {
            assert_eq!(s.bbox, *g);
        }
        for s in mine.iter().filter(|s| !s.labeled.positive) {
            assert!(im.gts.iter().all(|g| iou_ref(g, &s.bbox) < NEGATIVE_MAX_IOU));
        }
    }
    assert!(samples.iter().all(|s| s.labeled.patch.data().dim() == (1, 64, 64)));
    let again = build_patch_dataset(&images, 3, &mut common::rng(4)).unwrap();
    assert_eq!(samples, again);
}

#[test]
fn patch_sampling_needs_a_pedestrian() {
    let cfg = SceneConfig {
        pedestrians: (0, 0),
        ..scene(1)
    };
    let images = generate_dataset(&cfg, 3, "n").unwrap();
    assert!(build_patch_dataset(&images, 3, &mut common::rng(1)).is_err());
}

#[test]
fn annotations_round_trip_through_a_directory() {
    let images = generate_dataset(&scene(9), 6, "r").unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_annotations(dir.path(), &images).unwrap();
    let back: Vec<AnnotatedImage> = load_annotations(dir.path()).unwrap();
    assert_eq!(back.len(), images.len());
    for (a, b) in images.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.gts.len(), b.gts.len());
        for (x, y) in a.gts.iter().zip(&b.gts) {
            for (u, v) in x.coords().iter().zip(y.coords()) {
                assert!((u - v).abs() <= 1e-3);
            }
        }
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn malformed_annotation_names_the_line() {
    let err = parse_annotation("a 1 2 3 4\na 1 2 3\n", "a", "a.txt", 10.0, 10.0).unwrap_err();
    assert!(err.to_string().contains("a.txt:2"), "{err}");
    assert!(parse_annotation("", "a", "a.txt", 10.0, 10.0).unwrap().is_empty());
    assert!(parse_annotation("a 1 2 30 4\n", "a", "a.txt", 10.0, 10.0).is_err());
}

#[test]
fn missing_image_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ghost.txt"), "").unwrap();
    let err = load_annotations(dir.path()).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
}
