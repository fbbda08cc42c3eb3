//! Dense `(channels, height, width)` images with values in `[0, 1]`, bilinear
//! crop-and-resize, and portable graymap/pixmap interchange.

use std::path::Path;

use ndarray::Array3;

use crate::error::{FrpError, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(FrpError::Shape(format!("empty image {c}x{h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FrpError::Data("image contains non-finite values".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().to_owned(),
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Samples `(channels, out_h, out_w)` from the region `region`, mapping the
    /// centers of the first and last covered pixels onto the first and last
    /// output samples (corner-aligned bilinear interpolation). Sample positions
    /// are clamped to the image.
    pub fn resample(&self, region: &BoundingBox, out_h: usize, out_w: usize) -> Array3<f64> {
        let (c, h, w) = self.data.dim();
        // continuous coordinate v maps to pixel-index coordinate v - 0.5
        let (ax, bx) = index_span(region.x1(), region.x2());
        let (ay, by) = index_span(region.y1(), region.y2());
        let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|i| lerp_taps(ax, bx, i, out_w, w)).collect();
        let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| lerp_taps(ay, by, i, out_h, h)).collect();
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = self.data[(ci, y0, x0)] * (1.0 - fx) + self.data[(ci, y0, x1)] * fx;
                    let bottom = self.data[(ci, y1, x0)] * (1.0 - fx) + self.data[(ci, y1, x1)] * fx;
                    out[(ci, oy, ox)] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        out
    }

    /// Reads a binary or ASCII PGM/PPM file. Values are scaled to `[0, 1]`.
    pub fn load_pnm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| FrpError::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img.color().channel_count() {
            1 | 2 => {
                let gray = img.to_luma8();
                Array3::from_shape_fn((1, h, w), |(_, y, x)| gray.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
            }
            _ => {
                let rgb = img.to_rgb8();
                Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
            }
        };
        Image::new(data)
    }

    /// Writes an 8-bit binary PGM (one channel) or PPM (three channels).
    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.data.dim();
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let encoding = image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary);
        let file = std::fs::File::create(path).map_err(|e| FrpError::io(path, e))?;
        let writer = std::io::BufWriter::new(file);
        let result = match c {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                image::codecs::pnm::PnmEncoder::new(writer)
                    .with_subtype(encoding)
                    .encode(buf.as_slice(), w as u32, h as u32, image::ExtendedColorType::L8)
            }
            3 => {
                let mut buf = Vec::with_capacity(3 * h * w);
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..3 {
                            buf.push(to_u8(self.data[(ci, y, x)]));
                        }
                    }
                }
                image::codecs::pnm::PnmEncoder::new(writer).encode(
                    buf.as_slice(),
                    w as u32,
                    h as u32,
                    image::ExtendedColorType::Rgb8,
                )
            }
            _ => {
                return Err(FrpError::Shape(format!(
                    "can only write 1- or 3-channel images, got {c}"
                )))
            }
        };
        result.map_err(|e| FrpError::Data(format!("{}: {e}", path.display())))
    }

    /// Quantizes to the 8-bit grid used by the PNM files.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
        }
    }
}

fn index_span(lo: f64, hi: f64) -> (f64, f64) {
    let a = lo;
    let b = (hi - 1.0).max(lo);
    if hi - lo < 1.0 {
        let mid = (lo + hi) / 2.0 - 0.5;
        (mid, mid)
    } else {
        (a, b)
    }
}

fn lerp_taps(a: f64, b: f64, i: usize, n: usize, limit: usize) -> (usize, usize, f64) {
    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let u = (a + t * (b - a)).clamp(0.0, (limit - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(limit - 1);
    (i0, i1, u - i0 as f64)
}
