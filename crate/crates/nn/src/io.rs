//! `DNN1` model container.
//!
//! All integers are little-endian.
//!
//! | size      | field                                                   |
//! |-----------|---------------------------------------------------------|
//! | 4         | magic `DNN1`                                            |
//! | 4         | u32 format version (1)                                  |
//! | 4         | u32 input rank `r`                                      |
//! | 4·r       | u32 input dims (per item, no batch axis)                |
//! | 4         | u32 layer count `L`                                     |
//! | 21·L      | per layer: u8 kind tag, then five u32 fields            |
//! | 8         | u64 declared parameter count `P`                        |
//! | 4·P       | f32 parameters, layer order, weight then bias           |
//! | 4         | u32 metadata length `M`                                 |
//! | M         | metadata, UTF-8 JSON                                    |
//!
//! Kind tags and their fields (unused fields are zero): 1 conv2d (in, out,
//! kernel, stride, padding), 2 maxpool2d (size, stride), 3 relu, 4 dense (in,
//! out), 5 upsample2d (factor), 6 softmax, 7 concat (skip).

use std::path::Path;

use crate::error::{NnError, Result};
use crate::layer::LayerSpec;
use crate::model::{Model, ModelMeta, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNN1";
const VERSION: u32 = 1;

fn encode_layer(layer: &LayerSpec) -> (u8, [u32; 5]) {
    let u = |v: usize| v as u32;
    match *layer {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            (1, [u(in_channels), u(out_channels), u(kernel), u(stride), u(padding)])
        }
        LayerSpec::MaxPool2d { size, stride } => (2, [u(size), u(stride), 0, 0, 0]),
        LayerSpec::Relu => (3, [0; 5]),
        LayerSpec::Dense { in_features, out_features } => (4, [u(in_features), u(out_features), 0, 0, 0]),
        LayerSpec::Upsample2d { factor } => (5, [u(factor), 0, 0, 0, 0]),
        LayerSpec::Softmax => (6, [0; 5]),
        LayerSpec::Concat { skip } => (7, [u(skip), 0, 0, 0, 0]),
    }
}

fn decode_layer(tag: u8, f: [u32; 5], pos: usize) -> Result<LayerSpec> {
    let f = f.map(|v| v as usize);
    Ok(match tag {
        1 => LayerSpec::Conv2d { in_channels: f[0], out_channels: f[1], kernel: f[2], stride: f[3], padding: f[4] },
        2 => LayerSpec::MaxPool2d { size: f[0], stride: f[1] },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Dense { in_features: f[0], out_features: f[1] },
        5 => LayerSpec::Upsample2d { factor: f[0] },
        6 => LayerSpec::Softmax,
        7 => LayerSpec::Concat { skip: f[0] },
        other => return Err(NnError::Corrupt { pos, detail: format!("unknown layer tag {other}") }),
    })
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_shape().len() as u32).to_le_bytes());
    for &d in model.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        let (tag, fields) = encode_layer(layer);
        out.push(tag);
        for f in fields {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&model.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Corrupt {
                pos: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NnError::Corrupt { pos: 0, detail: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NnError::Corrupt { pos: 4, detail: format!("unsupported version {version}") });
    }
    let rank = r.u32("input rank")? as usize;
    if rank == 0 || rank > 3 {
        return Err(NnError::Corrupt { pos: r.pos - 4, detail: format!("input rank {rank}") });
    }
    let input = (0..rank).map(|_| r.u32("input dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        let pos = r.pos;
        let tag = r.take(1, "layer tag")?[0];
        let mut fields = [0u32; 5];
        for f in fields.iter_mut() {
            *f = r.u32("layer field")?;
        }
        layers.push(decode_layer(tag, fields, pos)?);
    }
    let table_end = r.pos;
    let mut model = Model::zeros(&input, layers, ModelMeta::default())
        .map_err(|e| NnError::Corrupt { pos: table_end, detail: format!("layer table invalid: {e}") })?;
    let declared = r.u64("parameter count")? as usize;
    if declared != model.param_count() {
        return Err(NnError::Corrupt {
            pos: table_end,
            detail: format!("declared {declared} parameters, layer table implies {}", model.param_count()),
        });
    }
    let blob = r.take(declared * 4, "parameters")?;
    let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut params = Vec::with_capacity(model.layers().len());
    for slot in model.params() {
        params.push(slot.as_ref().map(|p| {
            let w: Vec<f32> = values.by_ref().take(p.weight.len()).collect();
            let b: Vec<f32> = values.by_ref().take(p.bias.len()).collect();
            Param {
                weight: Tensor::new(p.weight.shape().to_vec(), w).expect("shape from spec"),
                bias: Tensor::new(p.bias.shape().to_vec(), b).expect("shape from spec"),
            }
        }));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_pos = r.pos;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| NnError::Corrupt { pos: meta_pos, detail: format!("metadata: {e}") })?;
    if r.pos != buf.len() {
        return Err(NnError::Corrupt { pos: r.pos, detail: "trailing bytes".into() });
    }
    model = Model::from_parts(&input, model.layers().to_vec(), params, meta)?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
