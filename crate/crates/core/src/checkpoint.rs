//! Binary container for models, datasets and raw tensors.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "GLAB" | version u32 | record count u32 | records...
//! record  = kind u8 (0 dense, 1 conv2d, 2 raw tensor) | body
//! layer   = activation u8 | stride u32 | pad u32 | tensor (weight) | tensor (bias)
//! raw     = tensor
//! tensor  = ndim u32 | dims u32 × ndim | f64 × prod(dims)
//! ```
//!
//! A model file is one raw record holding the per-sample input shape
//! followed by one record per layer in forward order.

use std::fs;
use std::path::Path;

use crate::error::{invalid, io_err, Error, Result};
use crate::model::{Activation, Layer, LayerKind, Model};

const MAGIC: &[u8; 4] = b"GLAB";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(invalid("tensor", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Layer(Layer),
    Raw(RawTensor),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_u32(out, shape.len());
    shape.iter().for_each(|&d| put_u32(out, d));
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, records.len());
    for r in records {
        match r {
            Record::Layer(l) => {
                let (kind, stride, pad) = match l.kind {
                    LayerKind::Dense => (0u8, 0, 0),
                    LayerKind::Conv2d { stride, pad } => (1u8, stride, pad),
                };
                out.push(kind);
                out.push(l.activation.code());
                put_u32(&mut out, stride);
                put_u32(&mut out, pad);
                put_tensor(&mut out, &l.weight_shape, &l.weight);
                put_tensor(&mut out, &[l.bias.len()], &l.bias);
            }
            Record::Raw(t) => {
                out.push(2);
                put_tensor(&mut out, &t.shape, &t.data);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<RawTensor> {
        let ndim = self.u32()?;
        if ndim > MAX_NDIM {
            return Err(self.fail(format!("tensor rank {ndim} exceeds {MAX_NDIM}")));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.fail("tensor size overflows"))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(self.fail(format!("truncated: tensor {shape:?} needs {} bytes", n * 8)));
        }
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(RawTensor { shape, data })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected GLAB".into() });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let kind = r.u8()?;
        let rec = match kind {
            0 | 1 => {
                let act = r.u8()?;
                let activation = Activation::from_code(act).ok_or_else(|| r.fail(format!("unknown activation code {act}")))?;
                let stride = r.u32()?;
                let pad = r.u32()?;
                let w = r.tensor()?;
                let b = r.tensor()?;
                if b.shape.len() != 1 {
                    return Err(r.fail("bias must be 1-D"));
                }
                let kind = if kind == 0 { LayerKind::Dense } else { LayerKind::Conv2d { stride, pad } };
                Record::Layer(Layer { kind, activation, weight: w.data, weight_shape: w.shape, bias: b.data })
            }
            2 => Record::Raw(r.tensor()?),
            k => return Err(Error::Format { offset: at as u64, msg: format!("unknown record kind {k}") }),
        };
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)).map_err(io_err(path))
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn model_records(model: &Model) -> Vec<Record> {
    let shape = model.input_shape();
    let header = RawTensor { shape: vec![shape.len()], data: shape.iter().map(|&d| d as f64).collect() };
    std::iter::once(Record::Raw(header)).chain(model.layers().iter().cloned().map(Record::Layer)).collect()
}

pub fn model_from_records(records: Vec<Record>) -> Result<Model> {
    let mut it = records.into_iter();
    let Some(Record::Raw(header)) = it.next() else {
        return Err(invalid("model checkpoint", "first record must hold the input shape"));
    };
    let input_shape = header.data.iter().map(|&d| d as usize).collect();
    let layers = it
        .map(|r| match r {
            Record::Layer(l) => Ok(l),
            Record::Raw(_) => Err(invalid("model checkpoint", "unexpected raw tensor after the header")),
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(input_shape, layers)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    save_records(path, &model_records(model))
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_records(load_records(path)?)
}

pub fn save_tensors(path: &Path, tensors: &[RawTensor]) -> Result<()> {
    save_records(path, &tensors.iter().cloned().map(Record::Raw).collect::<Vec<_>>())
}

pub fn load_tensors(path: &Path) -> Result<Vec<RawTensor>> {
    load_records(path)?
        .into_iter()
        .map(|r| match r {
            Record::Raw(t) => Ok(t),
            Record::Layer(_) => Err(invalid("tensor file", "contains a layer record")),
        })
        .collect()
}
