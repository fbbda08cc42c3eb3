use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn frp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frp"))
        .args(args)
        .env_remove("FRP_CONFIG")
        .output()
        .expect("the frp binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = frp(args);
    assert!(
        out.status.success(),
        "frp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn blank_pgm(file: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.resize(bytes.len() + w * h, 0);
    fs::write(file, bytes).unwrap();
}

/// Two 64x64 images: `a` with two pedestrians and `b` with one.
fn fixture_annotations(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    blank_pgm(&dir.join("a.pgm"), 64, 64);
    blank_pgm(&dir.join("b.pgm"), 64, 64);
    fs::write(dir.join("a.txt"), "a 0 0 10 20\na 20 0 30 20\n").unwrap();
    fs::write(dir.join("b.txt"), "b 0 0 10 20\n").unwrap();
    fs::write(dir.join("manifest.txt"), "a\nb\n").unwrap();
}

fn summary_value(summary: &str, key: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from {summary}"))
        .parse()
        .unwrap()
}

#[test]
fn eval_reproduces_the_hand_computed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann");
    fixture_annotations(&ann);
    let dets = dir.path().join("dets.txt");
    fs::write(
        &dets,
        "a 0.9 0 0 10 20\na 0.8 40 40 50 60\na 0.6 20 0 30 20\nb 0.7 50 50 60 70\n",
    )
    .unwrap();
    let out = dir.path().join("eval");
    let stdout = ok(&["eval", "--detections", path(&dets), "--annotations", path(&ann), "--out", path(&out)]);

    let lamr = ((8.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 9.0).exp();
    assert!((summary_value(&stdout, "log_average_miss_rate") - lamr).abs() < 1e-12);
    assert_eq!(summary_value(&stdout, "fppi_at_min_threshold"), 1.0);
    assert!((summary_value(&stdout, "recall_at_min_threshold") - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(fs::read_to_string(out.join("summary.txt")).unwrap(), stdout);
    let csv = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(out.join("mr_fppi.svg").exists());
}

#[test]
fn eval_rejects_detections_for_unknown_images() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann");
    fixture_annotations(&ann);
    let dets = dir.path().join("dets.txt");
    fs::write(&dets, "zzz 0.9 0 0 10 20\n").unwrap();
    let out = frp(&["eval", "--detections", path(&dets), "--annotations", path(&ann), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error[data]:"), "{stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", path(d), "--count", "10", "--set", "seed=7"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10 * 2 + 1);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }

    let empty = dir.path().join("empty");
    ok(&["gen-data", "--out", path(&empty), "--count", "0"]);
    assert_eq!(fs::read_to_string(empty.join("manifest.txt")).unwrap(), "");
}

#[test]
fn config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dumped = ok(&["config", "--set", "eps_c=0.4", "--set", "bench.seeds=3,4"]);
    assert!(dumped.contains("eps_c = 0.4"), "{dumped}");
    let file = dir.path().join("run.cfg");
    fs::write(&file, &dumped).unwrap();
    assert_eq!(ok(&["config", "--config", path(&file)]), dumped);
}

#[test]
fn errors_are_one_tagged_line_with_a_class_exit_code() {
    let cases: [(&[&str], i32, &str); 4] = [
        (&["config", "--set", "no_such_key=1"], 1, "error[config]:"),
        (&["config", "--set", "eps_c=2"], 1, "error[config]:"),
        (&["eval", "--detections", "/nonexistent/d.txt", "--annotations", "/nonexistent", "--out", "/tmp"], 2, "error[io]:"),
        (&["frobnicate"], 1, "error[usage]:"),
    ];
    for (args, code, prefix) in cases {
        let out = frp(args);
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
        assert!(stderr.starts_with(prefix), "{args:?}: {stderr}");
        assert_eq!(stderr.trim_end().lines().count(), 1, "{args:?}: {stderr}");
    }
}

const TINY: &[&str] = &[
    "--set",
    "classifier.epochs=2",
    "--set",
    "classifier.widths=4,4,8,8",
    "--set",
    "train.epochs=1",
    "--set",
    "train.top_k=16",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

#[test]
fn train_and_detect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--out", path(&d("train")), "--count", "6", "--set", "seed=1"]);
    ok(&["gen-data", "--out", path(&d("test")), "--count", "3", "--set", "seed=100"]);
    ok(&with_tiny(&["train-classifier", "--data", path(&d("train")), "--out", path(&d("clf.bin"))]));
    ok(&with_tiny(&[
        "train-detector",
        "--data",
        path(&d("train")),
        "--classifier",
        path(&d("clf.bin")),
        "--out",
        path(&d("det.bin")),
        "--tfrp",
        "on",
    ]));

    let (det, clf, test) = (d("det.bin"), d("clf.bin"), d("test"));
    let detect = |mode: &str, out: &str, extra: &[&str]| {
        let mut args = vec![
            "detect",
            "--weights",
            path(&det),
            "--classifier",
            path(&clf),
            "--images",
            path(&test),
            "--mode",
            mode,
        ];
        let target = d(out);
        args.extend(["--out", path(&target)]);
        args.extend(extra);
        ok(&args);
        fs::read_to_string(target).unwrap()
    };
    // a filter that keeps everything and a gate that never fires leave only
    // the baseline path
    let open = ["--set", "eps_c=0", "--set", "eps_s=0"];
    let base = detect("baseline", "base.txt", &open);
    assert_eq!(detect("full", "full.txt", &open), base);
    assert_eq!(detect("sfrp", "sfrp.txt", &open), base);
    let threaded = detect("baseline", "threads.txt", &["--threads", "3"]);
    assert_eq!(threaded, base);

    let missing = frp(&[
        "detect",
        "--weights",
        path(&d("det.bin")),
        "--images",
        path(&d("test")),
        "--out",
        path(&d("x.txt")),
        "--mode",
        "full",
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let eval = ok(&["eval", "--detections", path(&d("base.txt")), "--annotations", path(&d("test")), "--out", path(&d("ev"))]);
    assert_eq!(summary_value(&eval, "images"), 3.0);
}

#[test]
fn bench_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&with_tiny(&[
        "bench",
        "--out",
        path(&out),
        "--set",
        "bench.seeds=1,2",
        "--set",
        "data.train_images=6",
        "--set",
        "data.test_images=3",
    ]));
    let table = fs::read_to_string(out.join("table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    assert!(out.join("detections_full_seed2.txt").exists());
}
