//! Named-tensor weight container.
//!
//! ```text
//! "PRAMWTS1"
//! version: u64, kind: u64 (0 centroid, 1 transformer)
//! descriptor_dim: u64, num_classes: u64, num_heads: u64
//! tensor_count: u64
//! per tensor: name_len, name (utf-8), dtype (0 = f32), ndim, dims..., data
//! crc: u64                          CRC-32 of every byte between magic and crc
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Block, CentroidModel, LayerNorm, Linear, ModelKind, RecognitionError, RecognizerModel, TransformerWeights};
use crate::map::container::{open_envelope, seal_envelope, Reader, Writer};
use crate::map::MapError;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"PRAMWTS1";
pub const WEIGHTS_VERSION: u64 = 1;
const DTYPE_F32: u64 = 0;
const KIND_CENTROID: u64 = 0;
const KIND_TRANSFORMER: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, RecognitionError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(RecognitionError::ShapeMismatch(format!("shape {shape:?} holds {} values", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }
}

struct Tensors(BTreeMap<String, Tensor>);

impl Tensors {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor, RecognitionError> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| RecognitionError::ShapeMismatch(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(RecognitionError::ShapeMismatch(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    fn shape_of(&self, name: &str) -> Result<&[usize], RecognitionError> {
        self.0
            .get(name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| RecognitionError::ShapeMismatch(format!("missing tensor {name}")))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, RecognitionError> {
        let t = self.take(name, &[rows, cols])?;
        Ok(DMatrix::from_row_iterator(rows, cols, t.data.iter().map(|&v| v as f64)))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<DVector<f64>, RecognitionError> {
        let t = self.take(name, &[len])?;
        Ok(DVector::from_iterator(len, t.data.iter().map(|&v| v as f64)))
    }

    fn linear(&mut self, prefix: &str, out_dim: usize, in_dim: usize) -> Result<Linear, RecognitionError> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"), out_dim, in_dim)?,
            bias: self.vector(&format!("{prefix}.bias"), out_dim)?,
        })
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Result<LayerNorm, RecognitionError> {
        Ok(LayerNorm {
            weight: self.vector(&format!("{prefix}.weight"), dim)?,
            bias: self.vector(&format!("{prefix}.bias"), dim)?,
        })
    }
}

fn push_linear(out: &mut Vec<(String, Tensor)>, prefix: &str, l: &Linear) {
    out.push((format!("{prefix}.weight"), Tensor::from_matrix(&l.weight)));
    out.push((format!("{prefix}.bias"), Tensor::from_vector(&l.bias)));
}

fn push_norm(out: &mut Vec<(String, Tensor)>, prefix: &str, n: &LayerNorm) {
    out.push((format!("{prefix}.weight"), Tensor::from_vector(&n.weight)));
    out.push((format!("{prefix}.bias"), Tensor::from_vector(&n.bias)));
}

impl RecognizerModel {
    /// The model as named f32 tensors, in container order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.kind {
            ModelKind::Centroid(c) => {
                out.push((
                    "centroids".into(),
                    Tensor {
                        shape: vec![c.centroids.len(), self.descriptor_dim],
                        data: c.centroids.concat(),
                    },
                ));
                out.push(("temperature".into(), Tensor::scalar(c.temperature)));
                out.push(("null_bias".into(), Tensor::scalar(c.null_bias)));
            }
            ModelKind::Transformer(w) => {
                push_linear(&mut out, "input_proj", &w.input_proj);
                for (i, l) in w.pos.iter().enumerate() {
                    push_linear(&mut out, &format!("pos.{i}"), l);
                }
                for (b, blk) in w.blocks.iter().enumerate() {
                    let p = format!("blocks.{b}");
                    push_norm(&mut out, &format!("{p}.norm1"), &blk.norm1);
                    push_linear(&mut out, &format!("{p}.attn.q"), &blk.q);
                    push_linear(&mut out, &format!("{p}.attn.k"), &blk.k);
                    push_linear(&mut out, &format!("{p}.attn.v"), &blk.v);
                    push_linear(&mut out, &format!("{p}.attn.out"), &blk.out);
                    push_norm(&mut out, &format!("{p}.norm2"), &blk.norm2);
                    push_linear(&mut out, &format!("{p}.ffn.0"), &blk.ffn0);
                    push_linear(&mut out, &format!("{p}.ffn.1"), &blk.ffn1);
                }
                push_norm(&mut out, "norm", &w.norm);
                push_linear(&mut out, "head", &w.head);
            }
        }
        out
    }

    /// Assembles a transformer model from named tensors. Every required
    /// tensor must be present with a consistent shape; extras are rejected.
    pub fn transformer_from_tensors(num_heads: usize, tensors: BTreeMap<String, Tensor>) -> Result<Self, RecognitionError> {
        let mut t = Tensors(tensors);
        let (h, d) = match t.shape_of("input_proj.weight")? {
            [h, d] => (*h, *d),
            s => return Err(RecognitionError::ShapeMismatch(format!("input_proj.weight has shape {s:?}"))),
        };
        let c = match t.shape_of("head.weight")? {
            [c, _] => *c,
            s => return Err(RecognitionError::ShapeMismatch(format!("head.weight has shape {s:?}"))),
        };
        let mut blocks = Vec::new();
        while t.0.contains_key(&format!("blocks.{}.norm1.weight", blocks.len())) {
            let p = format!("blocks.{}", blocks.len());
            let f = super::FFN_EXPANSION * h;
            blocks.push(Block {
                norm1: t.norm(&format!("{p}.norm1"), h)?,
                q: t.linear(&format!("{p}.attn.q"), h, h)?,
                k: t.linear(&format!("{p}.attn.k"), h, h)?,
                v: t.linear(&format!("{p}.attn.v"), h, h)?,
                out: t.linear(&format!("{p}.attn.out"), h, h)?,
                norm2: t.norm(&format!("{p}.norm2"), h)?,
                ffn0: t.linear(&format!("{p}.ffn.0"), f, h)?,
                ffn1: t.linear(&format!("{p}.ffn.1"), h, f)?,
            });
        }
        let ph = super::POS_HIDDEN;
        let w = TransformerWeights {
            num_heads,
            input_proj: t.linear("input_proj", h, d)?,
            pos: [
                t.linear("pos.0", ph[0], 2)?,
                t.linear("pos.1", ph[1], ph[0])?,
                t.linear("pos.2", ph[2], ph[1])?,
                t.linear("pos.3", h, ph[2])?,
            ],
            blocks,
            norm: t.norm("norm", h)?,
            head: t.linear("head", c, h)?,
        };
        if let Some(name) = t.0.keys().next() {
            return Err(RecognitionError::ShapeMismatch(format!("unexpected tensor {name}")));
        }
        RecognizerModel::transformer(w)
    }

    fn centroid_from_tensors(
        descriptor_dim: usize,
        num_classes: usize,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self, RecognitionError> {
        let mut t = Tensors(tensors);
        let n = num_classes.checked_sub(1).ok_or_else(|| RecognitionError::ShapeMismatch("no classes".into()))?;
        let cen = t.take("centroids", &[n, descriptor_dim])?;
        let temperature = t.take("temperature", &[1])?.data[0];
        let null_bias = t.take("null_bias", &[1])?.data[0];
        if let Some(name) = t.0.keys().next() {
            return Err(RecognitionError::ShapeMismatch(format!("unexpected tensor {name}")));
        }
        let centroids = if descriptor_dim == 0 {
            vec![Vec::new(); n]
        } else {
            cen.data.chunks(descriptor_dim).map(<[f32]>::to_vec).collect()
        };
        let m = RecognizerModel {
            descriptor_dim,
            num_classes,
            kind: ModelKind::Centroid(CentroidModel {
                centroids,
                temperature,
                null_bias,
            }),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Encodes a model into the weight container.
pub fn write_weights(model: &RecognizerModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(WEIGHTS_VERSION);
    let (kind, heads) = match &model.kind {
        ModelKind::Centroid(_) => (KIND_CENTROID, 0),
        ModelKind::Transformer(t) => (KIND_TRANSFORMER, t.num_heads),
    };
    w.u64(kind);
    w.u64(model.descriptor_dim as u64);
    w.u64(model.num_classes as u64);
    w.u64(heads as u64);
    let tensors = model.named_tensors();
    w.u64(tensors.len() as u64);
    for (name, t) in &tensors {
        w.u64(name.len() as u64);
        w.bytes(name.as_bytes());
        w.u64(DTYPE_F32);
        w.u64(t.shape.len() as u64);
        for &d in &t.shape {
            w.u64(d as u64);
        }
        for &v in &t.data {
            w.f32(v);
        }
    }
    seal_envelope(WEIGHTS_MAGIC, &w.0)
}

/// Decodes a weight container and validates tensor shapes.
pub fn read_weights(bytes: &[u8]) -> Result<RecognizerModel, RecognitionError> {
    let body = open_envelope(bytes, WEIGHTS_MAGIC).map_err(|e| match e {
        MapError::BadMagic => RecognitionError::BadMagic,
        _ => RecognitionError::ChecksumMismatch,
    })?;
    let mut r = Reader::new(body);
    let m = RecognitionError::Malformed;
    let version = r.u64().map_err(m)?;
    if version != WEIGHTS_VERSION {
        return Err(RecognitionError::UnsupportedVersion(version));
    }
    let kind = r.u64().map_err(m)?;
    let descriptor_dim = r.usize().map_err(m)?;
    let num_classes = r.usize().map_err(m)?;
    let num_heads = r.usize().map_err(m)?;
    let count = r.count(32).map_err(m)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.count(1).map_err(m)?;
        let name = String::from_utf8(r.take(len).map_err(m)?.to_vec()).map_err(|e| m(e.to_string()))?;
        if r.u64().map_err(m)? != DTYPE_F32 {
            return Err(m(format!("tensor {name} has an unsupported dtype")));
        }
        let ndim = r.count(8).map_err(m)?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>, _>>().map_err(m)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(4) <= r.remaining())
            .ok_or_else(|| m(format!("tensor {name} exceeds the container")))?;
        let data = (0..numel).map(|_| r.f32()).collect::<Result<Vec<_>, _>>().map_err(m)?;
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(m(format!("duplicate tensor {name}")));
        }
    }
    r.finish().map_err(m)?;
    let model = match kind {
        KIND_CENTROID => RecognizerModel::centroid_from_tensors(descriptor_dim, num_classes, tensors)?,
        KIND_TRANSFORMER => RecognizerModel::transformer_from_tensors(num_heads, tensors)?,
        k => return Err(m(format!("unknown model kind {k}"))),
    };
    if model.descriptor_dim != descriptor_dim || model.num_classes != num_classes {
        return Err(RecognitionError::ShapeMismatch("header dimensions disagree with tensors".into()));
    }
    Ok(model)
}

pub fn save_weights(model: &RecognizerModel, path: impl AsRef<Path>) -> Result<(), RecognitionError> {
    std::fs::write(path, write_weights(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<RecognizerModel, RecognitionError> {
    read_weights(&std::fs::read(path)?)
}
