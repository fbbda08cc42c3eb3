//! Synthetic pedestrian scenes, classifier patch sampling, and the plain-text
//! annotation format.
//!
//! A scene holds labelled pedestrian figures (head disc over a two-legged
//! body bar) and unlabelled distractors: squares, horizontal bars, and
//! headless vertical bars. The headless bar is the deliberately confusable
//! case.
//!
//! Annotation directories contain, per image, `<id>.pgm` (or `.ppm`) and
//! `<id>.txt` with one `image_id x1 y1 x2 y2` line per ground-truth box, plus
//! a `manifest.txt` listing image ids in order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::{extract_patch, LabeledPatch};
use crate::error::{FrpError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Image,
    pub gts: Vec<BoundingBox>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: Image, gts: Vec<BoundingBox>) -> Result<Self> {
        let id = id.into();
        validate_id(&id)?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        if let Some(b) = gts.iter().find(|b| !b.is_within(w, h)) {
            return Err(FrpError::Data(format!("{id}: box {b} exceeds the {w}x{h} image")));
        }
        Ok(Self { id, image, gts })
    }
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') {
        return Err(FrpError::Data(format!("invalid image id {id:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Inclusive range of pedestrian figures per scene.
    pub pedestrians: (usize, usize),
    /// Inclusive range of distractors per scene.
    pub distractors: (usize, usize),
    /// Range of pedestrian heights in pixels; widths are `height * aspect`.
    pub pedestrian_height: (f64, f64),
    pub pedestrian_aspect: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            channels: 1,
            pedestrians: (1, 3),
            distractors: (2, 4),
            pedestrian_height: (28.0, 48.0),
            pedestrian_aspect: 0.4,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FrpError::Config(m));
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("scene size and channels must be positive".into());
        }
        if self.pedestrians.0 > self.pedestrians.1 || self.distractors.0 > self.distractors.1 {
            return bad("count ranges must satisfy min <= max".into());
        }
        let (lo, hi) = self.pedestrian_height;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid pedestrian height range ({lo}, {hi})"));
        }
        if hi >= self.height as f64 || hi * self.pedestrian_aspect * 1.5 >= self.width as f64 {
            return bad("pedestrians do not fit in the scene".into());
        }
        if !(self.pedestrian_aspect > 0.0 && self.pedestrian_aspect.is_finite()) {
            return bad("pedestrian aspect must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 100;
const MAX_GT_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Pedestrian,
    Square,
    HorizontalBar,
    VerticalBar,
}

/// Renders one scene. Pixel values are quantized to 8 bits so the scene
/// survives a PGM round trip unchanged.
pub fn generate_scene<R: Rng>(cfg: &SceneConfig, id: &str, rng: &mut R) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut canvas = background(cfg, rng);

    let n_ped = rng.gen_range(cfg.pedestrians.0..=cfg.pedestrians.1);
    let n_dis = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);

    let mut gts: Vec<BoundingBox> = Vec::new();
    for _ in 0..n_ped {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let ph = rng.gen_range(cfg.pedestrian_height.0..=cfg.pedestrian_height.1);
            let pw = ph * cfg.pedestrian_aspect;
            let x1 = rng.gen_range(1.0..(w - pw - 1.0));
            let y1 = rng.gen_range(1.0..(h - ph - 1.0));
            let b = BoundingBox::new(x1, y1, x1 + pw, y1 + ph)?;
            if gts.iter().all(|g| iou(g, &b) <= MAX_GT_IOU) {
                let value = object_value(rng);
                paint(&mut canvas, Shape::Pedestrian, &b, value);
                gts.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("{id}: could not place a pedestrian after {PLACEMENT_RETRIES} tries");
        }
    }

    let mut occupied: Vec<BoundingBox> = gts.clone();
    for _ in 0..n_dis {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let scale = rng.gen_range(cfg.pedestrian_height.0..=cfg.pedestrian_height.1);
            let (shape, bw, bh) = match rng.gen_range(0..4) {
                0 => {
                    let s = scale * rng.gen_range(0.3..0.6);
                    (Shape::Square, s, s)
                }
                1 => (Shape::HorizontalBar, scale * 0.8, scale * 0.22),
                // headless bars are twice as frequent: they carry the
                // pedestrian-like vertical structure
                _ => (
                    Shape::VerticalBar,
                    scale * cfg.pedestrian_aspect,
                    scale * rng.gen_range(0.8..1.0),
                ),
            };
            if bw + 2.0 >= w || bh + 2.0 >= h {
                continue;
            }
            let x1 = rng.gen_range(1.0..(w - bw - 1.0));
            let y1 = rng.gen_range(1.0..(h - bh - 1.0));
            let b = BoundingBox::new(x1, y1, x1 + bw, y1 + bh)?;
            let padded = BoundingBox::new(x1 - 2.0, y1 - 2.0, x1 + bw + 2.0, y1 + bh + 2.0)?;
            if occupied.iter().all(|o| o.intersection_area(&padded) == 0.0) {
                let value = object_value(rng);
                paint(&mut canvas, shape, &b, value);
                occupied.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("{id}: could not place a distractor after {PLACEMENT_RETRIES} tries");
        }
    }

    if cfg.noise > 0.0 {
        canvas.mapv_inplace(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal));
    }
    canvas.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    AnnotatedImage::new(id, Image::new(canvas)?, gts)
}

/// Scene `i` of a dataset uses the seed `base_seed + i`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, prefix: &str) -> Result<Vec<AnnotatedImage>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            generate_scene(cfg, &format!("{prefix}{i:05}"), &mut rng)
        })
        .collect()
}

fn object_value<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.7..0.95)
}

fn background<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Array3<f64> {
    let base = rng.gen_range(0.15..0.35);
    let gx = rng.gen_range(-0.1..0.1);
    let gy = rng.gen_range(-0.1..0.1);
    let fx = rng.gen_range(0.05..0.2);
    let fy = rng.gen_range(0.05..0.2);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    Array3::from_shape_fn((cfg.channels, cfg.height, cfg.width), |(c, y, x)| {
        let (u, v) = (x as f64 / w, y as f64 / h);
        base + gx * u + gy * v + 0.04 * ((fx * x as f64 + phase + c as f64).sin() * (fy * y as f64).cos())
    })
}

fn paint(canvas: &mut Array3<f64>, shape: Shape, b: &BoundingBox, value: f64) {
    let (c, h, w) = canvas.dim();
    let (bw, bh) = (b.width(), b.height());
    let (cx, _) = b.center();
    let inside = |px: f64, py: f64| -> bool {
        if px < b.x1() || px >= b.x2() || py < b.y1() || py >= b.y2() {
            return false;
        }
        match shape {
            Shape::Square | Shape::HorizontalBar | Shape::VerticalBar => true,
            Shape::Pedestrian => {
                // vertical bar with a head disc on top; the legs are split
                let head_r = 0.11 * bh;
                let head_cy = b.y1() + head_r;
                let neck = b.y1() + 2.0 * head_r;
                if py < neck {
                    let (dx, dy) = (px - cx, py - head_cy);
                    return dx * dx + dy * dy <= head_r * head_r;
                }
                let hips = b.y1() + 0.6 * bh;
                let gap = 0.12 * bw;
                !(py >= hips && (px - cx).abs() < gap / 2.0)
            }
        }
    };
    let x_lo = b.x1().floor().max(0.0) as usize;
    let x_hi = (b.x2().ceil() as usize).min(w);
    let y_lo = b.y1().floor().max(0.0) as usize;
    let y_hi = (b.y2().ceil() as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            // 2x2 supersampling for soft edges at fractional coordinates
            let mut cover = 0.0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    if inside(x as f64 + sx, y as f64 + sy) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                for ci in 0..c {
                    let v = &mut canvas[(ci, y, x)];
                    *v = *v * (1.0 - cover) + value * cover;
                }
            }
        }
    }
}

/// A classifier training patch and the box it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image_index: usize,
    pub bbox: BoundingBox,
    pub labeled: LabeledPatch,
}

pub const NEGATIVE_MAX_IOU: f64 = 0.2;

/// Positives are the ground-truth crops; negatives are random boxes whose IoU
/// with every ground truth of their image stays below 0.2.
pub fn build_patch_dataset<R: Rng>(
    images: &[AnnotatedImage],
    negatives_per_image: usize,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    if images.iter().all(|im| im.gts.is_empty()) {
        return Err(FrpError::Data("patch sampling needs at least one ground-truth box".into()));
    }
    let heights: Vec<f64> = images.iter().flat_map(|im| im.gts.iter().map(|g| g.height())).collect();
    let h_min = heights.iter().cloned().fold(f64::INFINITY, f64::min);
    let h_max = heights.iter().cloned().fold(0.0, f64::max);

    let mut out = Vec::new();
    for (idx, im) in images.iter().enumerate() {
        for g in &im.gts {
            out.push(PatchSample {
                image_index: idx,
                bbox: *g,
                labeled: LabeledPatch {
                    patch: extract_patch(&im.image, g)?,
                    positive: true,
                },
            });
        }
        let (w, h) = (im.image.width() as f64, im.image.height() as f64);
        for _ in 0..negatives_per_image {
            let mut found = None;
            for _ in 0..PLACEMENT_RETRIES {
                let bh = rng.gen_range(0.5 * h_min..=1.3 * h_max).min(h - 1.0);
                let bw = (bh * rng.gen_range(0.25..0.8)).min(w - 1.0);
                if bh < 2.0 || bw < 2.0 {
                    continue;
                }
                let x1 = rng.gen_range(0.0..=(w - bw));
                let y1 = rng.gen_range(0.0..=(h - bh));
                let b = BoundingBox::new(x1, y1, x1 + bw, y1 + bh)?;
                if im.gts.iter().all(|g| iou(g, &b) < NEGATIVE_MAX_IOU) {
                    found = Some(b);
                    break;
                }
            }
            match found {
                Some(b) => out.push(PatchSample {
                    image_index: idx,
                    bbox: b,
                    labeled: LabeledPatch {
                        patch: extract_patch(&im.image, &b)?,
                        positive: false,
                    },
                }),
                None => log::warn!("{}: skipped a negative patch after {PLACEMENT_RETRIES} tries", im.id),
            }
        }
    }
    Ok(out)
}

pub fn into_labeled(samples: Vec<PatchSample>) -> Vec<LabeledPatch> {
    samples.into_iter().map(|s| s.labeled).collect()
}

pub const MANIFEST: &str = "manifest.txt";

fn image_path(dir: &Path, id: &str, channels: usize) -> PathBuf {
    dir.join(format!("{id}.{}", if channels == 3 { "ppm" } else { "pgm" }))
}

/// Formats the annotation text of one image.
pub fn format_annotation(im: &AnnotatedImage) -> String {
    let mut s = String::new();
    for b in &im.gts {
        let _ = writeln!(s, "{} {} {} {} {}", im.id, b.x1(), b.y1(), b.x2(), b.y2());
    }
    s
}

/// Parses annotation lines for image `id`; `path` is only used in errors.
pub fn parse_annotation(text: &str, id: &str, path: &str, width: f64, height: f64) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FrpError::Parse {
            path: path.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields `image_id x1 y1 x2 y2`, found {}", fields.len())));
        }
        if fields[0] != id {
            return Err(err(format!("image id {:?} does not match {id:?}", fields[0])));
        }
        let mut c = [0.0; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| err(format!("invalid number {f:?}")))?;
        }
        let b = BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string()))?;
        if !b.is_within(width, height) {
            return Err(err(format!("box {b} exceeds the {width}x{height} image")));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn save_annotations(dir: &Path, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FrpError::io(dir, e))?;
    let mut manifest = String::new();
    for im in images {
        im.image.save_pnm(&image_path(dir, &im.id, im.image.channels()))?;
        let ann = dir.join(format!("{}.txt", im.id));
        fs::write(&ann, format_annotation(im)).map_err(|e| FrpError::io(&ann, e))?;
        manifest.push_str(&im.id);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| FrpError::io(&path, e))
}

/// Image ids of a directory: the manifest order when present, otherwise the
/// sorted stems of `*.txt` files.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| FrpError::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FrpError::io(dir, e))? {
        let path = entry.map_err(|e| FrpError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_annotations(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    list_ids(dir)?.iter().map(|id| load_one(dir, id)).collect()
}

fn load_one(dir: &Path, id: &str) -> Result<AnnotatedImage> {
    validate_id(id)?;
    let img_path = [image_path(dir, id, 1), image_path(dir, id, 3)]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| FrpError::Data(format!("missing image file for {id} in {}", dir.display())))?;
    let image = Image::load_pnm(&img_path)?;
    let ann = dir.join(format!("{id}.txt"));
    let text = fs::read_to_string(&ann).map_err(|e| FrpError::io(&ann, e))?;
    let gts = parse_annotation(
        &text,
        id,
        &ann.display().to_string(),
        image.width() as f64,
        image.height() as f64,
    )?;
    AnnotatedImage::new(id, image, gts)
}
