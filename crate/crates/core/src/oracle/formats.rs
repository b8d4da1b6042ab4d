//! Binary file formats: classic IDX archives, the `UAPT`/`UAPL` raw tensor
//! and label files, and `NNW1` model weights.
//!
//! IDX is big-endian; everything else is little-endian. `NNW1` stores each
//! weight matrix as inputs x outputs (so the bias has `cols` entries), the
//! transpose of [`DenseLayer`]'s in-memory layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::oracle::model::{Activation, DenseLayer, FeedForwardModel};
use crate::tensor::{ImageTensor, Shape};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const RAW_TENSOR_MAGIC: &[u8; 4] = b"UAPT";
pub const RAW_LABEL_MAGIC: &[u8; 4] = b"UAPL";
pub const RAW_VERSION: u8 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"NNW1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32_le_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(count_bytes(count, 4, self.pos)?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn count_bytes(count: usize, width: usize, offset: usize) -> Result<usize> {
    count.checked_mul(width).ok_or_else(|| Error::Parse {
        offset: offset as u64,
        message: format!("element count {count} overflows"),
    })
}

fn product(dims: &[u32], offset: usize) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d as usize)).ok_or_else(|| Error::Parse {
        offset: offset as u64,
        message: format!("dimensions {dims:?} overflow"),
    })
}

/// Raw unsigned-byte images exactly as stored in an IDX archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn shape(&self) -> Shape {
        Shape { height: self.rows, width: self.cols, channels: 1 }
    }

    /// Pixels rescaled by `/255`, paired with optional labels.
    pub fn to_tensors(&self, labels: Option<&[u8]>) -> Result<Vec<ImageTensor>> {
        if let Some(l) = labels {
            if l.len() != self.count {
                return Err(Error::Shape {
                    expected: format!("{} labels", self.count),
                    found: format!("{}", l.len()),
                });
            }
        }
        let shape = Shape::new(self.rows, self.cols, 1)?;
        let per = self.rows * self.cols;
        (0..self.count)
            .map(|k| {
                let data = self.pixels[k * per..(k + 1) * per]
                    .iter()
                    .map(|p| f64::from(*p) / 255.0)
                    .collect();
                ImageTensor::new(shape, data, labels.map(|l| usize::from(l[k])))
            })
            .collect()
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("bad IDX image magic {magic:#010x}") });
    }
    let dims_at = r.pos;
    let count = r.u32_be("image count")?;
    let rows = r.u32_be("row count")?;
    let cols = r.u32_be("column count")?;
    let total = product(&[count, rows, cols], dims_at)?;
    let pixels = r.take(total, "pixel data")?.to_vec();
    r.expect_end()?;
    Ok(IdxImages { count: count as usize, rows: rows as usize, cols: cols as usize, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("bad IDX label magic {magic:#010x}") });
    }
    let count = r.u32_be("label count")? as usize;
    let labels = r.take(count, "label data")?.to_vec();
    r.expect_end()?;
    Ok(labels)
}

pub fn write_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Shape {
            expected: format!("{}x{}x{} pixels", images.count, images.rows, images.cols),
            found: format!("{}", images.pixels.len()),
        });
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&u32_dim(d)?.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&u32_dim(labels.len())?.to_be_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

fn u32_dim(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Domain(format!("dimension {d} does not fit in u32")))
}

/// `N` tensors of one shape, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensors {
    pub shape: Shape,
    pub count: usize,
    pub values: Vec<f32>,
}

impl RawTensors {
    pub fn tensor(&self, k: usize) -> &[f32] {
        let n = self.shape.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let shape = images
            .first()
            .map(|x| x.shape())
            .ok_or_else(|| Error::Domain("no images to store".into()))?;
        let mut values = Vec::with_capacity(shape.len() * images.len());
        for x in images {
            if x.shape() != shape {
                return Err(Error::Shape { expected: shape.to_string(), found: x.shape().to_string() });
            }
            values.extend(x.data().iter().map(|v| *v as f32));
        }
        Ok(RawTensors { shape, count: images.len(), values })
    }

    /// Images in `[0, 1]`; labels attached when given.
    pub fn to_images(&self, labels: Option<&[u16]>) -> Result<Vec<ImageTensor>> {
        if let Some(l) = labels {
            if l.len() != self.count {
                return Err(Error::Shape {
                    expected: format!("{} labels", self.count),
                    found: format!("{}", l.len()),
                });
            }
        }
        (0..self.count)
            .map(|k| {
                let data = self.tensor(k).iter().map(|v| f64::from(*v)).collect();
                ImageTensor::new(self.shape, data, labels.map(|l| usize::from(l[k])))
            })
            .collect()
    }
}

pub fn parse_raw_tensors(bytes: &[u8]) -> Result<RawTensors> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != RAW_TENSOR_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad raw tensor magic".into() });
    }
    let version = r.u8("version")?;
    if version != RAW_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let dims_at = r.pos;
    let h = r.u32_le("height")?;
    let w = r.u32_le("width")?;
    let c = r.u32_le("channels")?;
    let n = r.u32_le("count")?;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Parse { offset: dims_at as u64, message: format!("zero dimension in {h}x{w}x{c}") });
    }
    let total = product(&[h, w, c, n], dims_at)?;
    let values = r.f32_le_vec(total, "tensor data")?;
    r.expect_end()?;
    Ok(RawTensors {
        shape: Shape { height: h as usize, width: w as usize, channels: c as usize },
        count: n as usize,
        values,
    })
}

pub fn write_raw_tensors(t: &RawTensors) -> Result<Vec<u8>> {
    if t.values.len() != t.shape.len() * t.count {
        return Err(Error::Shape {
            expected: format!("{} values", t.shape.len() * t.count),
            found: format!("{}", t.values.len()),
        });
    }
    let mut out = Vec::with_capacity(21 + 4 * t.values.len());
    out.extend_from_slice(RAW_TENSOR_MAGIC);
    out.push(RAW_VERSION);
    for d in [t.shape.height, t.shape.width, t.shape.channels, t.count] {
        out.extend_from_slice(&u32_dim(d)?.to_le_bytes());
    }
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_raw_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != RAW_LABEL_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad raw label magic".into() });
    }
    let version = r.u8("version")?;
    if version != RAW_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let n = r.u32_le("count")? as usize;
    let bytes = r.take(count_bytes(n, 2, r.pos)?, "label data")?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    r.expect_end()?;
    Ok(labels)
}

pub fn write_raw_labels(labels: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(9 + 2 * labels.len());
    out.extend_from_slice(RAW_LABEL_MAGIC);
    out.push(RAW_VERSION);
    out.extend_from_slice(&u32_dim(labels.len())?.to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Converts to `f32` without letting rounding push `|v|` past `bound`.
pub fn f32_within(v: f64, bound: f64) -> f32 {
    let mut x = v as f32;
    while f64::from(x).abs() > bound {
        // step one ulp toward zero
        x = f32::from_bits(x.to_bits() - 1);
    }
    x
}

pub fn parse_weights(bytes: &[u8]) -> Result<Vec<DenseLayer>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad weight file magic".into() });
    }
    let count = r.u32_le("layer count")?;
    let mut layers = Vec::new();
    for k in 0..count {
        let at = r.pos;
        let tag = r.u8("activation tag")?;
        let activation = Activation::from_tag(tag).ok_or_else(|| Error::Parse {
            offset: at as u64,
            message: format!("layer {k}: unknown activation tag {tag}"),
        })?;
        let dims_at = r.pos;
        let rows = r.u32_le("rows")?;
        let cols = r.u32_le("cols")?;
        let nw = product(&[rows, cols], dims_at)?;
        let stored = r.f32_le_vec(nw, "weights")?;
        let bias = r.f32_le_vec(cols as usize, "biases")?;
        let (inputs, outputs) = (rows as usize, cols as usize);
        // stored as inputs x outputs; held in memory as outputs x inputs
        let mut weights = vec![0.0; nw];
        for i in 0..inputs {
            for o in 0..outputs {
                weights[o * inputs + i] = f64::from(stored[i * outputs + o]);
            }
        }
        let layer = DenseLayer::new(
            outputs,
            inputs,
            weights,
            bias.into_iter().map(f64::from).collect(),
            activation,
        )
        .map_err(|e| Error::Parse { offset: at as u64, message: format!("layer {k}: {e}") })?;
        layers.push(layer);
    }
    r.expect_end()?;
    Ok(layers)
}

pub fn write_weights(layers: &[DenseLayer]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&u32_dim(layers.len())?.to_le_bytes());
    for l in layers {
        out.push(l.activation.tag());
        out.extend_from_slice(&u32_dim(l.cols)?.to_le_bytes());
        out.extend_from_slice(&u32_dim(l.rows)?.to_le_bytes());
        for i in 0..l.cols {
            for o in 0..l.rows {
                out.extend_from_slice(&(l.weights[o * l.cols + i] as f32).to_le_bytes());
            }
        }
        for v in &l.bias {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

impl FeedForwardModel {
    /// The model as it will read back from an `NNW1` file.
    pub fn rounded_to_f32(&self) -> FeedForwardModel {
        let mut m = self.clone();
        let p: Vec<f64> = m.parameters().iter().map(|v| f64::from(*v as f32)).collect();
        m.set_parameters(&p).expect("same layout");
        m
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Loads an IDX image archive with optional IDX labels.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Vec<ImageTensor>> {
    let imgs = parse_idx_images(&read_file(images)?)?;
    let labels = labels.map(|p| read_file(p).and_then(|b| parse_idx_labels(&b))).transpose()?;
    imgs.to_tensors(labels.as_deref())
}

/// Loads a `UAPT` tensor file with optional `UAPL` labels.
pub fn load_raw_f32(tensors: &Path, labels: Option<&Path>) -> Result<Vec<ImageTensor>> {
    let t = parse_raw_tensors(&read_file(tensors)?)?;
    let labels = labels.map(|p| read_file(p).and_then(|b| parse_raw_labels(&b))).transpose()?;
    t.to_images(labels.as_deref())
}

/// Dispatches on the file's leading magic bytes.
pub fn load_images(images: &Path, labels: Option<&Path>) -> Result<Vec<ImageTensor>> {
    let head = read_file(images)?;
    if head.starts_with(RAW_TENSOR_MAGIC) {
        load_raw_f32(images, labels)
    } else {
        load_idx(images, labels)
    }
}

pub fn load_model(path: &Path, input_shape: Shape) -> Result<FeedForwardModel> {
    FeedForwardModel::new(input_shape, parse_weights(&read_file(path)?)?)
}

pub fn save_model(path: &Path, model: &FeedForwardModel) -> Result<()> {
    write_file(path, &write_weights(model.layers())?)
}

pub fn save_raw_tensors(path: &Path, t: &RawTensors) -> Result<()> {
    write_file(path, &write_raw_tensors(t)?)
}

pub fn load_raw_tensors(path: &Path) -> Result<RawTensors> {
    parse_raw_tensors(&read_file(path)?)
}
