//! Small CNN pedestrian classifier: `(conv3 + relu, maxpool2) x 4` followed by
//! one fully connected layer with a sigmoid output, on 64x64 patches.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{self, LayerRecord, RecordKind, CLASSIFIER_MAGIC};
use crate::error::{FrpError, Result};
use crate::geometry::BoundingBox;
use crate::imaging::Image;
use crate::nn::{bce_with_logit, sigmoid, Activation, Conv2d, Dense, Layer, MaxPool2d, Sequential};

/// Side length of classifier input patches.
pub const PATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filter_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            filter_size: 3,
            stride: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn pool(channels: usize) -> Self {
        Self {
            kind: LayerKind::Pool,
            filter_size: 2,
            stride: 2,
            in_channels: channels,
            out_channels: channels,
        }
    }
}

/// Receptive field of every layer: `r_n = r_{n-1} + (f_n - 1) * prod_{i<n} s_i`,
/// starting from `r_0 = 1`.
pub fn receptive_field(specs: &[LayerSpec]) -> Vec<u64> {
    let mut rf = 1u64;
    let mut jump = 1u64;
    specs
        .iter()
        .map(|s| {
            rf += (s.filter_size as u64).saturating_sub(1) * jump;
            jump *= s.stride as u64;
            rf
        })
        .collect()
}

/// Classifier input: `(channels, 64, 64)` with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    data: Array3<f64>,
}

impl Patch {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h != PATCH_SIZE || w != PATCH_SIZE {
            return Err(FrpError::Shape(format!(
                "patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FrpError::Data("patch contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Crops `b` (clipped to the image), resizes bilinearly to 64x64 and clamps
/// to `[0, 1]`.
pub fn extract_patch(image: &Image, b: &BoundingBox) -> Result<Patch> {
    let clipped = b
        .clip_to_image(image.width() as f64, image.height() as f64)
        .ok_or_else(|| FrpError::Geometry(format!("box {b} lies outside the image")))?;
    let data = image
        .resample(&clipped, PATCH_SIZE, PATCH_SIZE)
        .mapv(|v| v.clamp(0.0, 1.0));
    Patch::new(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub input_channels: usize,
    /// Output channels of the four conv layers.
    pub widths: Vec<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            widths: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    net: Sequential,
    input_size: usize,
    input_channels: usize,
}

impl ClassifierWeights {
    /// Wraps a layer stack, checking that it maps `(channels, size, size)`
    /// to a single sigmoid output.
    pub fn from_net(net: Sequential, input_size: usize) -> Result<Self> {
        let input_channels = match net.layers.first() {
            Some(Layer::Conv(c)) => c.in_channels,
            Some(Layer::Dense(d)) => d.in_features / (input_size * input_size).max(1),
            _ => return Err(FrpError::Shape("classifier must start with a conv or dense layer".into())),
        };
        let (mut c, mut s) = (input_channels, input_size);
        let mut flat: Option<usize> = None;
        for (i, layer) in net.layers.iter().enumerate() {
            let terminal = i + 1 == net.layers.len();
            if layer.activation() == Activation::Sigmoid && !terminal {
                return Err(FrpError::Shape(format!("layer {i}: sigmoid only allowed on the output")));
            }
            match layer {
                Layer::Conv(conv) => {
                    if flat.is_some() || conv.in_channels != c {
                        return Err(FrpError::Shape(format!("layer {i}: conv expects {} channels, chain has {c}", conv.in_channels)));
                    }
                    c = conv.out_channels;
                }
                Layer::Pool(_) => {
                    if flat.is_some() || s < 2 {
                        return Err(FrpError::Shape(format!("layer {i}: cannot pool a {s}x{s} map")));
                    }
                    s /= 2;
                }
                Layer::Dense(d) => {
                    let n = flat.unwrap_or(c * s * s);
                    if d.in_features != n {
                        return Err(FrpError::Shape(format!("layer {i}: dense expects {} inputs, chain has {n}", d.in_features)));
                    }
                    flat = Some(d.out_features);
                }
            }
        }
        match (net.layers.last(), flat) {
            (Some(Layer::Dense(d)), Some(1)) if d.activation == Activation::Sigmoid => {}
            _ => {
                return Err(FrpError::Shape(
                    "classifier must end in a single-output sigmoid dense layer".into(),
                ))
            }
        }
        if !net.all_finite() {
            return Err(FrpError::Data("classifier parameters must be finite".into()));
        }
        Ok(Self {
            net,
            input_size,
            input_channels,
        })
    }

    /// Randomly initialised network for a 64x64 input.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(arch, &mut rng)
    }

    fn init_with_rng(arch: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.widths.is_empty() || arch.widths.iter().any(|&w| w == 0) || arch.input_channels == 0 {
            return Err(FrpError::Config("classifier widths and channels must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut c = arch.input_channels;
        let mut s = PATCH_SIZE;
        for &w in &arch.widths {
            if s < 2 {
                return Err(FrpError::Config("too many conv/pool stages for a 64x64 input".into()));
            }
            layers.push(Layer::Conv(Conv2d::init(c, w, 3, Activation::Relu, rng)));
            layers.push(Layer::Pool(MaxPool2d));
            c = w;
            s /= 2;
        }
        layers.push(Layer::Dense(Dense::init(c * s * s, 1, Activation::Sigmoid, rng)));
        Self::from_net(Sequential::new(layers), PATCH_SIZE)
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Layer specs; the dense layer is reported with the spatial extent of
    /// its input as its filter size.
    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut s = self.input_size;
        let mut c = self.input_channels;
        self.net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(conv) => {
                    c = conv.out_channels;
                    LayerSpec::conv(conv.in_channels, conv.out_channels)
                }
                Layer::Pool(_) => {
                    s /= 2;
                    LayerSpec::pool(c)
                }
                Layer::Dense(d) => LayerSpec {
                    kind: LayerKind::FullyConnected,
                    filter_size: s,
                    stride: 1,
                    in_channels: d.in_features,
                    out_channels: d.out_features,
                },
            })
            .collect()
    }

    /// Pedestrian confidence of a patch, in `(0, 1)`.
    pub fn forward(&self, patch: &Patch) -> Result<f64> {
        self.forward_tensor(patch.data())
    }

    pub fn forward_tensor(&self, x: &Array3<f64>) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    fn logit(&self, x: &Array3<f64>) -> Result<f64> {
        self.check_input(x)?;
        let (out, _) = self.net.forward_cached(x)?;
        Ok(out[(0, 0, 0)])
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let expected = (self.input_channels, self.input_size, self.input_size);
        if x.dim() != expected {
            return Err(FrpError::Shape(format!(
                "classifier expects input {expected:?}, got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<LayerRecord> = self.net.layers.iter().map(LayerRecord::from_layer).collect();
        container::save_records(path, CLASSIFIER_MAGIC, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = container::load_records(path, CLASSIFIER_MAGIC)?;
        Self::from_records(&records)
    }

    pub fn from_records(records: &[LayerRecord]) -> Result<Self> {
        let layers = records
            .iter()
            .map(|r| {
                if r.kind == RecordKind::Anchors {
                    Err(FrpError::Format("classifier file contains an anchor record".into()))
                } else {
                    r.to_layer()
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Sequential::new(layers);
        let input_size = infer_input_size(&net)?;
        Self::from_net(net, input_size).map_err(|e| FrpError::Format(format!("inconsistent layer shapes: {e}")))
    }
}

fn infer_input_size(net: &Sequential) -> Result<usize> {
    let pools = net.layers.iter().filter(|l| matches!(l, Layer::Pool(_))).count() as u32;
    let last_channels = net
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c.out_channels),
            _ => None,
        })
        .last();
    let first_dense = net.layers.iter().find_map(|l| match l {
        Layer::Dense(d) => Some(d.in_features),
        _ => None,
    });
    match (last_channels, first_dense) {
        (Some(c), Some(n)) if c > 0 && n % c == 0 => {
            let area = n / c;
            let side = (area as f64).sqrt().round() as usize;
            if side * side != area {
                return Err(FrpError::Format(format!("dense input {n} is not c*s*s for c = {c}")));
            }
            Ok(side << pools)
        }
        _ => Err(FrpError::Format("cannot infer classifier input size".into())),
    }
}

/// Convenience for scoring many boxes in one image.
pub fn score_box(weights: &ClassifierWeights, image: &Image, b: &BoundingBox) -> Result<f64> {
    weights.forward(&extract_patch(image, b)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random translation of each training patch by up to this many pixels
    /// per axis (edge pixels replicated); 0 disables it.
    pub max_shift: usize,
    pub architecture: ArchitectureConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 8,
            batch_size: 16,
            max_shift: 0,
            architecture: ArchitectureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean binary cross-entropy over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean binary cross-entropy over `batch` and its gradient for every parameter.
pub fn gradient(weights: &ClassifierWeights, batch: &[(&Array3<f64>, f64)]) -> Result<(f64, Sequential)> {
    if batch.is_empty() {
        return Err(FrpError::Data("gradient of an empty batch".into()));
    }
    let net = &weights.net;
    let mut grads = net.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &(x, label) in batch {
        weights.check_input(x)?;
        let (out, caches) = net.forward_cached(x)?;
        let (loss, dlogit) = bce_with_logit(out[(0, 0, 0)], label);
        total += loss;
        let dout = Array3::from_elem((1, 1, 1), dlogit * scale);
        net.backward(&caches, &dout, &mut grads, false);
    }
    Ok((total * scale, grads))
}

pub fn accuracy(weights: &ClassifierWeights, patches: &[LabeledPatch]) -> Result<f64> {
    if patches.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for p in patches {
        let score = weights.forward(&p.patch)?;
        if (score >= 0.5) == p.positive {
            correct += 1;
        }
    }
    Ok(correct as f64 / patches.len() as f64)
}

/// `x` translated by `(dy, dx)` pixels; uncovered pixels copy the nearest edge.
pub fn shift_patch(x: &Array3<f64>, dy: isize, dx: isize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, xx)| {
        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
        let sx = (xx as isize - dx).clamp(0, w as isize - 1) as usize;
        x[(ci, sy, sx)]
    })
}

pub fn train_classifier(patches: &[LabeledPatch], config: &ClassifierTrainConfig, seed: u64) -> Result<ClassifierWeights> {
    train_classifier_with_report(patches, config, seed).map(|(w, _)| w)
}

/// Plain mini-batch SGD on binary cross-entropy. Batch order is a seeded
/// shuffle, so the result is a pure function of data, config and seed.
pub fn train_classifier_with_report(
    patches: &[LabeledPatch],
    config: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(ClassifierWeights, TrainingReport)> {
    let positives = patches.iter().filter(|p| p.positive).count();
    if positives == 0 || positives == patches.len() {
        return Err(FrpError::Data(format!(
            "classifier training needs both classes, got {positives} positive and {} negative patches",
            patches.len() - positives
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(FrpError::Config("batch size and learning rate must be positive".into()));
    }
    let channels = patches[0].patch.channels();
    if channels != config.architecture.input_channels {
        return Err(FrpError::Shape(format!(
            "patches have {channels} channels, architecture expects {}",
            config.architecture.input_channels
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ClassifierWeights::init_with_rng(&config.architecture, &mut rng)?;
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let shifted: Vec<Array3<f64>> = if config.max_shift > 0 {
                let m = config.max_shift as isize;
                chunk
                    .iter()
                    .map(|&i| shift_patch(patches[i].patch.data(), rng.gen_range(-m..=m), rng.gen_range(-m..=m)))
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<(&Array3<f64>, f64)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let x = if shifted.is_empty() { patches[i].patch.data() } else { &shifted[k] };
                    (x, if patches[i].positive { 1.0 } else { 0.0 })
                })
                .collect();
            let (loss, grads) = gradient(&weights, &batch)?;
            if !loss.is_finite() {
                return Err(FrpError::Training { stage: "epoch", index: epoch });
            }
            weights.net.add_scaled(-config.learning_rate, &grads);
            sum += loss;
            batches += 1;
        }
        if !weights.net.all_finite() {
            return Err(FrpError::Training { stage: "epoch", index: epoch });
        }
        let mean = sum / batches as f64;
        log::debug!("classifier epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&weights, patches)?;
    Ok((
        weights,
        TrainingReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}
