//! Minimal double-precision CNN substrate shared by the classifier and the
//! detector: 3x3/1x1 "same" convolutions, 2x2 max pooling, dense layers and
//! hand-written backpropagation.
//!
//! Tensors are `(channels, height, width)` arrays. Dense layers consume the
//! row-major flattening of their input and emit an `(n, 1, 1)` tensor, so a
//! whole stack can pass `Array3` values end to end.
//!
//! A terminal `Sigmoid` activation is only applied by [`Sequential::forward`].
//! The cached training path returns the pre-sigmoid logit so losses can use
//! the numerically stable logit form of binary cross-entropy.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FrpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, and its
/// derivative with respect to the logit.
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

/// Smooth-L1 (Huber with unit transition) and its derivative.
pub fn smooth_l1(diff: f64) -> (f64, f64) {
    if diff.abs() < 1.0 {
        (0.5 * diff * diff, diff)
    } else {
        (diff.abs() - 0.5, diff.signum())
    }
}

/// Square "same" convolution with odd kernel size and unit stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            activation,
        }
    }

    /// He-normal initialisation, zero bias.
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, activation);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        conv.weight
            .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        conv
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = Array2::<f64>::zeros((c * k * k, hw));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            let plane = &xs[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let src_row = sy as usize * w;
                        let s0 = (src_row as isize + x_lo as isize + dx) as usize;
                        let len = x_hi - x_lo;
                        dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[s0..s0 + len]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut x = Array3::<f64>::zeros((c, h, w));
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let xs = x.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                        for xx in x_lo..x_hi {
                            let sx = (xx as isize + dx) as usize;
                            xs[ci * hw + sy as usize * w + sx] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        x
    }

    fn forward_cached(&self, x: &Array3<f64>, terminal: bool) -> Result<(Array3<f64>, LayerCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(FrpError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = x.as_standard_layout().to_owned();
        let cols = self.im2col(&x);
        let mut out = self.weight.dot(&cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += *b;
        }
        apply_activation(&mut out, self.activation, terminal);
        let out = out
            .into_shape_with_order((self.out_channels, h, w))
            .expect("conv output shape");
        Ok((
            out.clone(),
            LayerCache::Conv {
                cols,
                output: out,
                input_dim: (c, h, w),
            },
        ))
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaxPool2d;

impl MaxPool2d {
    fn forward_cached(&self, x: &Array3<f64>) -> Result<(Array3<f64>, LayerCache)> {
        let (c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(FrpError::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
        }
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = (ci, 2 * oy, 2 * ox);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ci, 2 * oy + dy, 2 * ox + dx);
                            let v = x[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ci, oy, ox)] = best;
                    argmax.push(best_idx);
                }
            }
        }
        Ok((
            out,
            LayerCache::Pool {
                argmax,
                input_dim: (c, h, w),
            },
        ))
    }
}

/// Fully connected layer over the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_features: usize, out_features: usize, activation: Activation) -> Self {
        Self {
            in_features,
            out_features,
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
            activation,
        }
    }

    pub fn init<R: Rng>(in_features: usize, out_features: usize, activation: Activation, rng: &mut R) -> Self {
        let mut dense = Self::zeros(in_features, out_features, activation);
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        let std = (gain / in_features as f64).sqrt();
        dense
            .weight
            .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        dense
    }

    fn forward_cached(&self, x: &Array3<f64>, terminal: bool) -> Result<(Array3<f64>, LayerCache)> {
        if x.len() != self.in_features {
            return Err(FrpError::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_features,
                x.len()
            )));
        }
        let input: Array1<f64> = x.iter().copied().collect();
        let mut out = self.weight.dot(&input) + &self.bias;
        apply_activation(&mut out, self.activation, terminal);
        let output = out
            .into_shape_with_order((self.out_features, 1, 1))
            .expect("dense output shape");
        Ok((
            output.clone(),
            LayerCache::Dense {
                input,
                output,
                input_dim: x.dim(),
            },
        ))
    }
}

fn apply_activation<D: ndarray::Dimension>(
    out: &mut ndarray::Array<f64, D>,
    activation: Activation,
    terminal: bool,
) {
    match activation {
        Activation::Identity => {}
        Activation::Relu => out.mapv_inplace(|v| v.max(0.0)),
        Activation::Sigmoid => {
            if !terminal {
                out.mapv_inplace(sigmoid)
            }
        }
    }
}

/// Per-element derivative of the activation, expressed through its output.
fn activation_grad(activation: Activation, output: f64) -> f64 {
    match activation {
        Activation::Identity => 1.0,
        Activation::Relu => {
            if output > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => output * (1.0 - output),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Pool(MaxPool2d),
    Dense(Dense),
}

impl Layer {
    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            Layer::Pool(_) => 0,
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Conv(c) => c.activation,
            Layer::Pool(_) => Activation::Identity,
            Layer::Dense(d) => d.activation,
        }
    }

    fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d::zeros(c.in_channels, c.out_channels, c.kernel, c.activation)),
            Layer::Pool(p) => Layer::Pool(*p),
            Layer::Dense(d) => Layer::Dense(Dense::zeros(d.in_features, d.out_features, d.activation)),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![
                c.weight.as_slice().expect("standard layout"),
                c.bias.as_slice().expect("standard layout"),
            ],
            Layer::Pool(_) => Vec::new(),
            Layer::Dense(d) => vec![
                d.weight.as_slice().expect("standard layout"),
                d.bias.as_slice().expect("standard layout"),
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![
                c.weight.as_slice_mut().expect("standard layout"),
                c.bias.as_slice_mut().expect("standard layout"),
            ],
            Layer::Pool(_) => Vec::new(),
            Layer::Dense(d) => vec![
                d.weight.as_slice_mut().expect("standard layout"),
                d.bias.as_slice_mut().expect("standard layout"),
            ],
        }
    }

    fn forward_cached(&self, x: &Array3<f64>, terminal: bool) -> Result<(Array3<f64>, LayerCache)> {
        match self {
            Layer::Conv(c) => c.forward_cached(x, terminal),
            Layer::Pool(p) => p.forward_cached(x),
            Layer::Dense(d) => d.forward_cached(x, terminal),
        }
    }

    /// Accumulates parameter gradients into `grad` (a layer of identical
    /// shape) and returns the gradient with respect to the layer input.
    fn backward(
        &self,
        cache: &LayerCache,
        dout: &Array3<f64>,
        grad: &mut Layer,
        terminal: bool,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        match (self, cache, grad) {
            (Layer::Conv(conv), LayerCache::Conv { cols, output, input_dim }, Layer::Conv(g)) => {
                let (c, h, w) = *input_dim;
                let act = if terminal && conv.activation == Activation::Sigmoid {
                    Activation::Identity
                } else {
                    conv.activation
                };
                let mut dpre = dout.clone();
                if act != Activation::Identity {
                    dpre.zip_mut_with(output, |d, &o| *d *= activation_grad(act, o));
                }
                let dpre = dpre
                    .into_shape_with_order((conv.out_channels, h * w))
                    .expect("conv grad shape");
                g.weight += &dpre.dot(&cols.t());
                g.bias += &dpre.sum_axis(Axis(1));
                if need_input_grad {
                    let dcols = conv.weight.t().dot(&dpre);
                    Some(conv.col2im(dcols.view(), c, h, w))
                } else {
                    None
                }
            }
            (Layer::Pool(_), LayerCache::Pool { argmax, input_dim }, Layer::Pool(_)) => {
                if !need_input_grad {
                    return None;
                }
                let mut dx = Array3::<f64>::zeros(*input_dim);
                for (d, idx) in dout.iter().zip(argmax.iter()) {
                    dx[*idx] += *d;
                }
                Some(dx)
            }
            (Layer::Dense(dense), LayerCache::Dense { input, output, input_dim }, Layer::Dense(g)) => {
                let act = if terminal && dense.activation == Activation::Sigmoid {
                    Activation::Identity
                } else {
                    dense.activation
                };
                let mut dpre: Array1<f64> = dout.iter().copied().collect();
                if act != Activation::Identity {
                    dpre.zip_mut_with(&output.iter().copied().collect::<Array1<f64>>(), |d, &o| {
                        *d *= activation_grad(act, o)
                    });
                }
                let dcol = dpre.view().insert_axis(Axis(1));
                let xrow = input.view().insert_axis(Axis(0));
                g.weight += &dcol.dot(&xrow);
                g.bias += &dpre;
                if need_input_grad {
                    let dx = dense.weight.t().dot(&dpre);
                    Some(dx.into_shape_with_order(*input_dim).expect("dense input shape"))
                } else {
                    None
                }
            }
            _ => unreachable!("layer, cache and gradient kinds always agree"),
        }
    }
}

/// Intermediate values kept by the training forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv {
        cols: Array2<f64>,
        output: Array3<f64>,
        input_dim: (usize, usize, usize),
    },
    Pool {
        argmax: Vec<(usize, usize, usize)>,
        input_dim: (usize, usize, usize),
    },
    Dense {
        input: Array1<f64>,
        output: Array3<f64>,
        input_dim: (usize, usize, usize),
    },
}

/// An ordered stack of layers. Also used as the container for gradients and
/// optimizer state, which share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Full inference pass, including a terminal sigmoid if present.
    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let mut cur = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, _) = layer.forward_cached(&cur, false)?;
            cur = out;
            if i + 1 == n {
                break;
            }
        }
        Ok(cur)
    }

    /// Training pass; a terminal sigmoid is left unapplied (logit output).
    pub fn forward_cached(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Vec<LayerCache>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward_cached(&cur, i + 1 == n)?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, caches))
    }

    /// Backpropagates `dout` (gradient with respect to the value returned by
    /// [`Sequential::forward_cached`]) and accumulates into `grads`.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        dout: &Array3<f64>,
        grads: &mut Sequential,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let n = self.layers.len();
        let mut cur = dout.clone();
        for i in (0..n).rev() {
            let need = need_input_grad || i > 0;
            match self.layers[i].backward(&caches[i], &cur, &mut grads.layers[i], i + 1 == n, need) {
                Some(dx) => cur = dx,
                None => return None,
            }
        }
        Some(cur)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for p in layer.params() {
                out.extend_from_slice(p);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(FrpError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.len();
                p.copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, elementwise over parameters.
    pub fn add_scaled(&mut self, alpha: f64, other: &Sequential) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (pa, pb) in a.params_mut().into_iter().zip(b.params()) {
                for (x, y) in pa.iter_mut().zip(pb.iter()) {
                    *x += alpha * y;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                for x in p.iter_mut() {
                    *x *= alpha;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.params().iter().all(|p| p.iter().all(|v| v.is_finite())))
    }
}
