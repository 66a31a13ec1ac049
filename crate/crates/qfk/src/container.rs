//! `.qfk` model container.
//!
//! ```text
//! magic "QFKMODEL" | version u16 LE | header length u32 LE | header JSON
//! blob 0 | crc32(blob 0) u32 LE | blob 1 | crc32(blob 1) | ...
//! ```
//!
//! The JSON header describes the graph topology and, for every parameter
//! tensor, its shape and blob index. Blobs hold little-endian `f32`, `i8` or
//! `i32` values.

use serde::{Deserialize, Serialize};

use qfk_core::graph::{Graph, Node, NodeId, NodeKind, Outputs, Params};
use qfk_core::quantizer::{Fusion, QNode, QuantWeights, QuantizedGraph};
use qfk_core::tensor::{QuantParams, Shape, TensorF32, TensorI8};
use qfk_core::uynet::UYNetConfig;

pub const MAGIC: &[u8; 8] = b"QFKMODEL";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a qfk model (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated")]
    Truncated,
    #[error("checksum mismatch in blob {0}")]
    ChecksumMismatch(usize),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("inconsistent container: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] qfk_core::Error),
}

pub use qfk_core::bench::Precision;

/// Provenance carried alongside the graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<UYNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// True once batch norms have been folded into convolutions.
    #[serde(default)]
    pub folded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobRef {
    blob: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FpNodeRecord {
    id: NodeId,
    kind: NodeKind,
    inputs: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<(String, BlobRef)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QWeightsRecord {
    weight: BlobRef,
    weight_qparams: QuantParams,
    bias: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QNodeRecord {
    id: NodeId,
    kind: NodeKind,
    inputs: Vec<NodeId>,
    out_qparams: QuantParams,
    fusion: Fusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<QWeightsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRecords {
    Fp32(Vec<FpNodeRecord>),
    Int8(Vec<QNodeRecord>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    precision: Precision,
    meta: ModelMeta,
    input: NodeId,
    outputs: Outputs,
    input_shape: Shape,
    nodes: NodeRecords,
    blobs: Vec<(Dtype, usize)>,
}

/// A model read from a container.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Fp32(Graph),
    Int8(QuantizedGraph),
}

impl Model {
    pub fn precision(&self) -> Precision {
        match self {
            Model::Fp32(_) => Precision::Fp32,
            Model::Int8(_) => Precision::Int8,
        }
    }
}

#[derive(Default)]
struct BlobWriter {
    table: Vec<(Dtype, usize)>,
    bytes: Vec<Vec<u8>>,
}

impl BlobWriter {
    fn push(&mut self, dtype: Dtype, len: usize, bytes: Vec<u8>, shape: &Shape) -> BlobRef {
        self.table.push((dtype, len));
        self.bytes.push(bytes);
        BlobRef {
            blob: self.table.len() - 1,
            shape: shape.dims().to_vec(),
        }
    }

    fn f32(&mut self, t: &TensorF32) -> BlobRef {
        let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(Dtype::F32, t.data().len(), bytes, t.shape())
    }

    fn i8(&mut self, t: &TensorI8) -> BlobRef {
        let bytes = t.data().iter().map(|&v| v as u8).collect();
        self.push(Dtype::I8, t.data().len(), bytes, t.shape())
    }

    fn i32(&mut self, v: &[i32]) -> BlobRef {
        let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let shape = Shape::new(vec![v.len()]).expect("bias is nonempty");
        self.push(Dtype::I32, v.len(), bytes, &shape)
    }
}

fn assemble(header: &Header, blobs: &[Vec<u8>]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out =
        Vec::with_capacity(14 + json.len() + blobs.iter().map(|b| b.len() + 4).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        out.extend_from_slice(b);
        out.extend_from_slice(&crc32fast::hash(b).to_le_bytes());
    }
    out
}

pub fn encode_graph(g: &Graph, meta: &ModelMeta) -> Vec<u8> {
    let mut w = BlobWriter::default();
    let nodes = g
        .nodes
        .iter()
        .map(|n| FpNodeRecord {
            id: n.id,
            kind: n.kind,
            inputs: n.inputs.clone(),
            params: n
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| (name.to_string(), w.f32(t)))
                .collect(),
        })
        .collect();
    let header = Header {
        precision: Precision::Fp32,
        meta: meta.clone(),
        input: g.input,
        outputs: g.outputs,
        input_shape: g.input_shape.clone(),
        nodes: NodeRecords::Fp32(nodes),
        blobs: w.table,
    };
    assemble(&header, &w.bytes)
}

pub fn encode_quantized(qg: &QuantizedGraph, meta: &ModelMeta) -> Vec<u8> {
    let mut w = BlobWriter::default();
    let nodes = qg
        .nodes
        .iter()
        .map(|n| QNodeRecord {
            id: n.id,
            kind: n.kind,
            inputs: n.inputs.clone(),
            out_qparams: n.out_qp,
            fusion: n.fusion,
            weights: n.weights.as_ref().map(|q| QWeightsRecord {
                weight: w.i8(&q.weight),
                weight_qparams: q.weight.qparams(),
                bias: w.i32(&q.bias),
            }),
        })
        .collect();
    let header = Header {
        precision: Precision::Int8,
        meta: meta.clone(),
        input: qg.input,
        outputs: qg.outputs,
        input_shape: qg.input_shape.clone(),
        nodes: NodeRecords::Int8(nodes),
        blobs: w.table,
    };
    assemble(&header, &w.bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(ContainerError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
}

enum Blob {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

fn inconsistent(msg: impl Into<String>) -> ContainerError {
    ContainerError::Inconsistent(msg.into())
}

struct Blobs(Vec<Option<Blob>>);

impl Blobs {
    fn take(&mut self, r: &BlobRef) -> Result<(Shape, Blob), ContainerError> {
        let shape = Shape::new(r.shape.clone())?;
        let blob = self
            .0
            .get_mut(r.blob)
            .and_then(Option::take)
            .ok_or_else(|| inconsistent(format!("blob {} missing or used twice", r.blob)))?;
        Ok((shape, blob))
    }

    fn f32(&mut self, r: &BlobRef) -> Result<TensorF32, ContainerError> {
        match self.take(r)? {
            (shape, Blob::F32(v)) => Ok(TensorF32::new(shape, v)?),
            _ => Err(inconsistent(format!("blob {} is not f32", r.blob))),
        }
    }

    fn i8(&mut self, r: &BlobRef, qp: QuantParams) -> Result<TensorI8, ContainerError> {
        match self.take(r)? {
            (shape, Blob::I8(v)) => Ok(TensorI8::new(shape, v, qp)?),
            _ => Err(inconsistent(format!("blob {} is not i8", r.blob))),
        }
    }

    fn i32(&mut self, r: &BlobRef) -> Result<Vec<i32>, ContainerError> {
        match self.take(r)? {
            (_, Blob::I32(v)) => Ok(v),
            _ => Err(inconsistent(format!("blob {} is not i32", r.blob))),
        }
    }
}

/// Parses a container, verifying magic, version and every checksum.
pub fn decode(bytes: &[u8]) -> Result<(Model, ModelMeta), ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| ContainerError::BadMagic)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;

    let mut blobs = Vec::with_capacity(header.blobs.len());
    for (i, &(dtype, len)) in header.blobs.iter().enumerate() {
        let width = match dtype {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::I8 => 1,
        };
        let data = r.take(len.checked_mul(width).ok_or(ContainerError::Truncated)?)?;
        let crc = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if crc32fast::hash(data) != crc {
            return Err(ContainerError::ChecksumMismatch(i));
        }
        let words = || {
            data.chunks_exact(4)
                .map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"))
        };
        blobs.push(Some(match dtype {
            Dtype::F32 => Blob::F32(words().map(f32::from_le_bytes).collect()),
            Dtype::I32 => Blob::I32(words().map(i32::from_le_bytes).collect()),
            Dtype::I8 => Blob::I8(data.iter().map(|&b| b as i8).collect()),
        }));
    }
    if r.pos != bytes.len() {
        return Err(inconsistent("trailing bytes after last blob"));
    }
    let mut blobs = Blobs(blobs);

    let model = match (&header.precision, &header.nodes) {
        (Precision::Fp32, NodeRecords::Fp32(records)) => {
            let mut nodes = Vec::with_capacity(records.len());
            for rec in records {
                let mut t: Vec<TensorF32> = Vec::new();
                for (_, b) in &rec.params {
                    t.push(blobs.f32(b)?);
                }
                let names: Vec<&str> = rec.params.iter().map(|(n, _)| n.as_str()).collect();
                let mut t = t.into_iter();
                let params = match (rec.kind, names.as_slice()) {
                    (NodeKind::Conv2d { .. }, ["weight", "bias"]) => Params::Conv {
                        weight: t.next().unwrap(),
                        bias: t.next().unwrap(),
                    },
                    (NodeKind::Dense { .. }, ["weight", "bias"]) => Params::Dense {
                        weight: t.next().unwrap(),
                        bias: t.next().unwrap(),
                    },
                    (NodeKind::BatchNorm { .. }, ["gamma", "beta", "mean", "var"]) => {
                        Params::BatchNorm {
                            gamma: t.next().unwrap(),
                            beta: t.next().unwrap(),
                            mean: t.next().unwrap(),
                            var: t.next().unwrap(),
                        }
                    }
                    (_, []) => Params::None,
                    (kind, names) => {
                        return Err(inconsistent(format!(
                            "node {} ({}) has parameters {names:?}",
                            rec.id,
                            kind.name()
                        )))
                    }
                };
                nodes.push(Node {
                    id: rec.id,
                    kind: rec.kind,
                    inputs: rec.inputs.clone(),
                    params,
                });
            }
            let g = Graph {
                nodes,
                input: header.input,
                outputs: header.outputs,
                input_shape: header.input_shape.clone(),
            };
            qfk_core::graph::validate(&g).into_result()?;
            Model::Fp32(g)
        }
        (Precision::Int8, NodeRecords::Int8(records)) => {
            let mut nodes = Vec::with_capacity(records.len());
            for rec in records {
                let weights = match &rec.weights {
                    Some(w) => Some(QuantWeights {
                        weight: blobs.i8(&w.weight, w.weight_qparams)?,
                        bias: blobs.i32(&w.bias)?,
                    }),
                    None => None,
                };
                rec.out_qparams.validate()?;
                nodes.push(QNode {
                    id: rec.id,
                    kind: rec.kind,
                    inputs: rec.inputs.clone(),
                    weights,
                    out_qp: rec.out_qparams,
                    fusion: rec.fusion,
                });
            }
            let qg = QuantizedGraph {
                nodes,
                input: header.input,
                outputs: header.outputs,
                input_shape: header.input_shape.clone(),
            };
            qg.infer_shapes(1)?;
            Model::Int8(qg)
        }
        (p, _) => {
            return Err(inconsistent(format!(
                "node records do not match precision {p:?}"
            )))
        }
    };
    if blobs.0.iter().any(Option::is_some) {
        return Err(inconsistent("unreferenced blobs"));
    }
    Ok((model, header.meta))
}

pub fn write_model(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    std::fs::write(path, bytes)
}

pub fn read_model(path: &std::path::Path) -> anyhow::Result<(Model, ModelMeta)> {
    let bytes =
        std::fs::read(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    decode(&bytes).map_err(|e| anyhow::Error::new(e).context(format!("loading {}", path.display())))
}
