//! Binary weight container shared by classifier (`FRPC`) and detector
//! (`FRPD`) files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        [u8; 4]
//! version      u32            (currently 1)
//! layer_count  u32
//! layer_count x {
//!     kind         u8         0 = conv, 1 = max-pool, 2 = fully connected, 3 = anchor set
//!     activation   u8         0 = identity, 1 = relu, 2 = sigmoid
//!     filter_size  u32
//!     stride       u32
//!     in_channels  u32
//!     out_channels u32
//!     param_count  u64
//!     params       f64 x param_count   (weights row-major, then biases)
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{FrpError, Result};
use crate::nn::{Activation, Conv2d, Dense, Layer, MaxPool2d};

pub const FORMAT_VERSION: u32 = 1;
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"FRPC";
pub const DETECTOR_MAGIC: [u8; 4] = *b"FRPD";

const MAX_PARAMS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Conv,
    Pool,
    FullyConnected,
    Anchors,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Conv => 0,
            RecordKind::Pool => 1,
            RecordKind::FullyConnected => 2,
            RecordKind::Anchors => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RecordKind::Conv),
            1 => Some(RecordKind::Pool),
            2 => Some(RecordKind::FullyConnected),
            3 => Some(RecordKind::Anchors),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub kind: RecordKind,
    pub activation: Activation,
    pub filter_size: u32,
    pub stride: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub params: Vec<f64>,
}

impl LayerRecord {
    pub fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Conv(c) => LayerRecord {
                kind: RecordKind::Conv,
                activation: c.activation,
                filter_size: c.kernel as u32,
                stride: 1,
                in_channels: c.in_channels as u32,
                out_channels: c.out_channels as u32,
                params: c.weight.iter().chain(c.bias.iter()).copied().collect(),
            },
            Layer::Pool(_) => LayerRecord {
                kind: RecordKind::Pool,
                activation: Activation::Identity,
                filter_size: 2,
                stride: 2,
                in_channels: 0,
                out_channels: 0,
                params: Vec::new(),
            },
            Layer::Dense(d) => LayerRecord {
                kind: RecordKind::FullyConnected,
                activation: d.activation,
                filter_size: 1,
                stride: 1,
                in_channels: d.in_features as u32,
                out_channels: d.out_features as u32,
                params: d.weight.iter().chain(d.bias.iter()).copied().collect(),
            },
        }
    }

    pub fn to_layer(&self) -> Result<Layer> {
        let (i, o) = (self.in_channels as usize, self.out_channels as usize);
        match self.kind {
            RecordKind::Conv => {
                let k = self.filter_size as usize;
                if k % 2 == 0 || self.stride != 1 {
                    return Err(FrpError::Format(format!(
                        "unsupported conv geometry: filter {k}, stride {}",
                        self.stride
                    )));
                }
                let nw = o * i * k * k;
                self.expect_params(nw + o)?;
                Ok(Layer::Conv(Conv2d {
                    in_channels: i,
                    out_channels: o,
                    kernel: k,
                    weight: Array2::from_shape_vec((o, i * k * k), self.params[..nw].to_vec())
                        .expect("checked length"),
                    bias: Array1::from_vec(self.params[nw..].to_vec()),
                    activation: self.activation,
                }))
            }
            RecordKind::Pool => {
                if self.filter_size != 2 || self.stride != 2 {
                    return Err(FrpError::Format(format!(
                        "unsupported pool geometry: filter {}, stride {}",
                        self.filter_size, self.stride
                    )));
                }
                self.expect_params(0)?;
                Ok(Layer::Pool(MaxPool2d))
            }
            RecordKind::FullyConnected => {
                let nw = o * i;
                self.expect_params(nw + o)?;
                Ok(Layer::Dense(Dense {
                    in_features: i,
                    out_features: o,
                    weight: Array2::from_shape_vec((o, i), self.params[..nw].to_vec()).expect("checked length"),
                    bias: Array1::from_vec(self.params[nw..].to_vec()),
                    activation: self.activation,
                }))
            }
            RecordKind::Anchors => Err(FrpError::Format("anchor record where a layer was expected".into())),
        }
    }

    fn expect_params(&self, n: usize) -> Result<()> {
        if self.params.len() != n {
            return Err(FrpError::Format(format!(
                "{:?} record carries {} parameters, shape implies {n}",
                self.kind,
                self.params.len()
            )));
        }
        Ok(())
    }
}

pub fn write_container<W: Write>(mut out: W, magic: [u8; 4], records: &[LayerRecord]) -> std::io::Result<()> {
    out.write_all(&magic)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(records.len() as u32)?;
    for r in records {
        out.write_u8(r.kind.code())?;
        out.write_u8(r.activation.code())?;
        out.write_u32::<LittleEndian>(r.filter_size)?;
        out.write_u32::<LittleEndian>(r.stride)?;
        out.write_u32::<LittleEndian>(r.in_channels)?;
        out.write_u32::<LittleEndian>(r.out_channels)?;
        out.write_u64::<LittleEndian>(r.params.len() as u64)?;
        for &p in &r.params {
            out.write_f64::<LittleEndian>(p)?;
        }
    }
    out.flush()
}

pub fn read_container<R: Read>(mut input: R, magic: [u8; 4]) -> Result<Vec<LayerRecord>> {
    let truncated = |what: &str| FrpError::Format(format!("truncated file while reading {what}"));
    let mut found = [0u8; 4];
    input.read_exact(&mut found).map_err(|_| truncated("magic"))?;
    if found != magic {
        return Err(FrpError::Version(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = input.read_u32::<LittleEndian>().map_err(|_| truncated("version"))?;
    if version != FORMAT_VERSION {
        return Err(FrpError::Version(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = input.read_u32::<LittleEndian>().map_err(|_| truncated("layer count"))?;
    let mut records = Vec::with_capacity(count.min(1024) as usize);
    for idx in 0..count {
        let ctx = |field: &str| truncated(&format!("layer {idx} {field}"));
        let kind_code = input.read_u8().map_err(|_| ctx("kind"))?;
        let kind = RecordKind::from_code(kind_code)
            .ok_or_else(|| FrpError::Format(format!("layer {idx}: unknown kind {kind_code}")))?;
        let act_code = input.read_u8().map_err(|_| ctx("activation"))?;
        let activation = Activation::from_code(act_code)
            .ok_or_else(|| FrpError::Format(format!("layer {idx}: unknown activation {act_code}")))?;
        let filter_size = input.read_u32::<LittleEndian>().map_err(|_| ctx("filter size"))?;
        let stride = input.read_u32::<LittleEndian>().map_err(|_| ctx("stride"))?;
        let in_channels = input.read_u32::<LittleEndian>().map_err(|_| ctx("in channels"))?;
        let out_channels = input.read_u32::<LittleEndian>().map_err(|_| ctx("out channels"))?;
        let n = input.read_u64::<LittleEndian>().map_err(|_| ctx("parameter count"))?;
        if n > MAX_PARAMS {
            return Err(FrpError::Format(format!("layer {idx}: implausible parameter count {n}")));
        }
        let mut params = Vec::with_capacity((n as usize).min(1 << 20));
        for _ in 0..n {
            let v = input.read_f64::<LittleEndian>().map_err(|_| ctx("parameters"))?;
            if !v.is_finite() {
                return Err(FrpError::Format(format!("layer {idx}: non-finite parameter")));
            }
            params.push(v);
        }
        records.push(LayerRecord {
            kind,
            activation,
            filter_size,
            stride,
            in_channels,
            out_channels,
            params,
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| FrpError::Format(e.to_string()))? != 0 {
        return Err(FrpError::Format("trailing bytes after last layer".into()));
    }
    Ok(records)
}

pub fn save_records(path: &Path, magic: [u8; 4], records: &[LayerRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| FrpError::io(path, e))?;
    write_container(std::io::BufWriter::new(file), magic, records).map_err(|e| FrpError::io(path, e))
}

pub fn load_records(path: &Path, magic: [u8; 4]) -> Result<Vec<LayerRecord>> {
    let file = std::fs::File::open(path).map_err(|e| FrpError::io(path, e))?;
    read_container(std::io::BufReader::new(file), magic)
}
