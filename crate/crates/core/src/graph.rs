//! Computational graph IR: operators, validation and shape inference.
//!
//! A [`Graph`] is a topologically ordered list of nodes; every node may only
//! reference nodes that appear before it, which makes the graph acyclic by
//! construction. The input node feeds an NCHW image batch; the outputs are
//! the per-pixel mask probabilities and, for the full model, the class score.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{Shape, TensorF32};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "op", rename_all = "snake_case"))]
pub enum NodeKind {
    Input,
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        eps: f32,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Upsample2xNearest,
    /// Concatenation along the channel axis.
    Concat,
    GlobalAvgPool,
    Dense {
        out_features: usize,
    },
    Sigmoid,
    /// Softmax over the channel axis at every pixel.
    SoftmaxPerPixel,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool2d { .. } => "max_pool2d",
            NodeKind::Upsample2xNearest => "upsample2x_nearest",
            NodeKind::Concat => "concat",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Dense { .. } => "dense",
            NodeKind::Sigmoid => "sigmoid",
            NodeKind::SoftmaxPerPixel => "softmax_per_pixel",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            NodeKind::Input => n == 0,
            NodeKind::Concat => n >= 2,
            _ => n == 1,
        }
    }

    fn check_params(&self) -> core::result::Result<(), &'static str> {
        let ok = match *self {
            NodeKind::Conv2d {
                out_channels,
                kernel: (kh, kw),
                stride,
                ..
            } => out_channels > 0 && kh > 0 && kw > 0 && stride > 0,
            NodeKind::BatchNorm { eps } => eps.is_finite() && eps >= 0.0,
            NodeKind::MaxPool2d { kernel, stride } => kernel > 0 && stride > 0,
            NodeKind::Dense { out_features } => out_features > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err("dimensional parameters must be positive")
        }
    }
}

/// Learned parameters attached to a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    None,
    /// `weight` is (O, I, kh, kw); `bias` is (O).
    Conv {
        weight: TensorF32,
        bias: TensorF32,
    },
    /// Per-channel vectors of length C.
    BatchNorm {
        gamma: TensorF32,
        beta: TensorF32,
        mean: TensorF32,
        var: TensorF32,
    },
    /// `weight` is (F, In); `bias` is (F).
    Dense {
        weight: TensorF32,
        bias: TensorF32,
    },
}

impl Params {
    /// Named tensors in a fixed order (used by serialization).
    pub fn tensors(&self) -> Vec<(&'static str, &TensorF32)> {
        match self {
            Params::None => Vec::new(),
            Params::Conv { weight, bias } | Params::Dense { weight, bias } => {
                alloc::vec![("weight", weight), ("bias", bias)]
            }
            Params::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => alloc::vec![
                ("gamma", gamma),
                ("beta", beta),
                ("mean", mean),
                ("var", var)
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub params: Params,
}

/// Output nodes of a model. Segmentation-only models have no class output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Outputs {
    pub mask: NodeId,
    pub class: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub input: NodeId,
    pub outputs: Outputs,
    /// Nominal input shape with batch 1, e.g. (1, 3, 224, 224).
    pub input_shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId(NodeId),
    ForwardReference { node: NodeId, input: NodeId },
    UnknownReference { node: NodeId, input: NodeId },
    Arity { node: NodeId, found: usize },
    BadParams { node: NodeId, reason: &'static str },
    InputCount(usize),
    InputNotInputNode(NodeId),
    UnknownOutput(NodeId),
    Unreachable(NodeId),
    Shape(Error),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::ForwardReference { node, input } => {
                write!(f, "forward reference: {node} reads {input}")
            }
            Violation::UnknownReference { node, input } => {
                write!(f, "unknown reference: {node} reads {input}")
            }
            Violation::Arity { node, found } => write!(f, "bad arity at {node}: {found} inputs"),
            Violation::BadParams { node, reason } => {
                write!(f, "bad parameters at {node}: {reason}")
            }
            Violation::InputCount(n) => write!(f, "expected exactly one input node, found {n}"),
            Violation::InputNotInputNode(id) => write!(f, "graph input {id} is not an input node"),
            Violation::UnknownOutput(id) => write!(f, "unknown output {id}"),
            Violation::Unreachable(id) => write!(f, "node {id} unreachable from input"),
            Violation::Shape(e) => write!(f, "shape inference failed: {e}"),
        }
    }
}

/// All violations found by [`validate`]; empty means the graph is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            let msg: Vec<String> = self
                .violations
                .iter()
                .map(|v| alloc::format!("{v}"))
                .collect();
            Err(Error::InvalidGraph(msg.join("; ")))
        }
    }
}

impl Graph {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Position of each node id in the ordered node list.
    pub fn positions(&self) -> BTreeMap<NodeId, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    /// Consumers of every node, in node order.
    pub fn consumers(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                if let Some(v) = map.get_mut(i) {
                    v.push(n.id);
                }
            }
        }
        map
    }

    pub fn output_ids(&self) -> Vec<NodeId> {
        let mut v = alloc::vec![self.outputs.mask];
        v.extend(self.outputs.class);
        v
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.mask == id || self.outputs.class == Some(id)
    }
}

pub fn validate(g: &Graph) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<NodeId, usize> = BTreeMap::new();
    let all_ids: BTreeMap<NodeId, ()> = g.nodes.iter().map(|n| (n.id, ())).collect();

    for (pos, n) in g.nodes.iter().enumerate() {
        if seen.contains_key(&n.id) {
            violations.push(Violation::DuplicateId(n.id));
        }
        for &input in &n.inputs {
            if !seen.contains_key(&input) {
                if all_ids.contains_key(&input) {
                    violations.push(Violation::ForwardReference { node: n.id, input });
                } else {
                    violations.push(Violation::UnknownReference { node: n.id, input });
                }
            }
        }
        if !n.kind.arity_ok(n.inputs.len()) {
            violations.push(Violation::Arity {
                node: n.id,
                found: n.inputs.len(),
            });
        }
        if let Err(reason) = n.kind.check_params() {
            violations.push(Violation::BadParams { node: n.id, reason });
        }
        seen.entry(n.id).or_insert(pos);
    }

    let input_nodes = g.nodes.iter().filter(|n| n.kind == NodeKind::Input).count();
    if input_nodes != 1 {
        violations.push(Violation::InputCount(input_nodes));
    }
    match g.node(g.input) {
        Some(n) if n.kind == NodeKind::Input => {}
        _ => violations.push(Violation::InputNotInputNode(g.input)),
    }
    for out in g.output_ids() {
        if !all_ids.contains_key(&out) {
            violations.push(Violation::UnknownOutput(out));
        }
    }

    // forward reachability in one pass; only meaningful in topological order
    let ordered = !violations.iter().any(|v| {
        matches!(
            v,
            Violation::ForwardReference { .. } | Violation::UnknownReference { .. }
        )
    });
    if ordered {
        let mut reached: BTreeMap<NodeId, bool> = BTreeMap::new();
        for n in &g.nodes {
            let r = n.id == g.input
                || n.inputs
                    .iter()
                    .any(|i| reached.get(i).copied().unwrap_or(false));
            reached.insert(n.id, r);
            if !r {
                violations.push(Violation::Unreachable(n.id));
            }
        }
    }

    if violations.is_empty() {
        if let Err(e) = infer_shapes(g, &g.input_shape) {
            violations.push(Violation::Shape(e));
        }
    }
    ValidationReport { violations }
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn mismatch(node: NodeId, expected: &[usize], found: &Shape) -> Error {
    Error::ShapeMismatch {
        node,
        expected: Shape::new(expected.to_vec()).unwrap_or_else(|_| found.clone()),
        found: found.clone(),
    }
}

fn expect_shape(node: NodeId, t: &TensorF32, expected: &[usize]) -> Result<()> {
    if t.shape().dims() == expected {
        Ok(())
    } else {
        Err(mismatch(node, expected, t.shape()))
    }
}

/// Output shape of one node given its input shapes. Also checks parameter shapes.
pub fn node_output_shape(node: &Node, inputs: &[&Shape]) -> Result<Shape> {
    let id = node.id;
    let nchw = |s: &Shape| {
        s.as_nchw().ok_or_else(|| Error::ShapeMismatch {
            node: id,
            expected: Shape::nchw(s.dims()[0], 1, 1, 1).expect("valid"),
            found: s.clone(),
        })
    };
    match node.kind {
        NodeKind::Input => Err(Error::InvalidGraph(alloc::format!(
            "input node {id} has no computed shape"
        ))),
        NodeKind::Conv2d {
            out_channels,
            kernel: (kh, kw),
            stride,
            padding,
        } => {
            let (n, c, h, w) = nchw(inputs[0])?;
            if let Params::Conv { weight, bias } = &node.params {
                expect_shape(id, weight, &[out_channels, c, kh, kw])?;
                expect_shape(id, bias, &[out_channels])?;
            } else {
                return Err(Error::InvalidGraph(alloc::format!(
                    "conv {id} lacks parameters"
                )));
            }
            let oh = conv_out(h, kh, stride, padding);
            let ow = conv_out(w, kw, stride, padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Shape::nchw(n, out_channels, oh, ow),
                _ => Err(mismatch(id, &[n, c, kh, kw], inputs[0])),
            }
        }
        NodeKind::BatchNorm { .. } => {
            let (_, c, _, _) = nchw(inputs[0])?;
            if let Params::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } = &node.params
            {
                for t in [gamma, beta, mean, var] {
                    expect_shape(id, t, &[c])?;
                }
            } else {
                return Err(Error::InvalidGraph(alloc::format!(
                    "batch norm {id} lacks parameters"
                )));
            }
            Ok(inputs[0].clone())
        }
        NodeKind::Relu | NodeKind::Sigmoid => Ok(inputs[0].clone()),
        NodeKind::SoftmaxPerPixel => {
            nchw(inputs[0])?;
            Ok(inputs[0].clone())
        }
        NodeKind::MaxPool2d { kernel, stride } => {
            let (n, c, h, w) = nchw(inputs[0])?;
            match (
                conv_out(h, kernel, stride, 0),
                conv_out(w, kernel, stride, 0),
            ) {
                (Some(oh), Some(ow)) => Shape::nchw(n, c, oh, ow),
                _ => Err(mismatch(id, &[n, c, kernel, kernel], inputs[0])),
            }
        }
        NodeKind::Upsample2xNearest => {
            let (n, c, h, w) = nchw(inputs[0])?;
            Shape::nchw(n, c, 2 * h, 2 * w)
        }
        NodeKind::Concat => {
            let (n, mut c, h, w) = nchw(inputs[0])?;
            for s in &inputs[1..] {
                let (n2, c2, h2, w2) = nchw(s)?;
                if (n2, h2, w2) != (n, h, w) {
                    return Err(mismatch(id, &[n, c2, h, w], s));
                }
                c += c2;
            }
            Shape::nchw(n, c, h, w)
        }
        NodeKind::GlobalAvgPool => {
            let (n, c, _, _) = nchw(inputs[0])?;
            Shape::nchw(n, c, 1, 1)
        }
        NodeKind::Dense { out_features } => {
            let n = inputs[0].dims()[0];
            let features = inputs[0].volume() / n;
            if let Params::Dense { weight, bias } = &node.params {
                expect_shape(id, weight, &[out_features, features])?;
                expect_shape(id, bias, &[out_features])?;
            } else {
                return Err(Error::InvalidGraph(alloc::format!(
                    "dense {id} lacks parameters"
                )));
            }
            Shape::new(alloc::vec![n, out_features])
        }
    }
}

/// Shapes of every node output for a given input shape.
pub fn infer_shapes(g: &Graph, input_shape: &Shape) -> Result<BTreeMap<NodeId, Shape>> {
    if input_shape.rank() != 4 {
        return Err(mismatch(g.input, &[1, 3, 224, 224], input_shape));
    }
    let mut shapes: BTreeMap<NodeId, Shape> = BTreeMap::new();
    for n in &g.nodes {
        let shape = if n.kind == NodeKind::Input {
            input_shape.clone()
        } else {
            let ins: Vec<&Shape> = n
                .inputs
                .iter()
                .map(|i| {
                    shapes.get(i).ok_or_else(|| {
                        Error::InvalidGraph(alloc::format!(
                            "{} reads unknown or later node {i}",
                            n.id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            node_output_shape(n, &ins)?
        };
        shapes.insert(n.id, shape);
    }
    Ok(shapes)
}

/// Incremental graph construction with sequential ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: NodeKind, inputs: &[NodeId], params: Params) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            kind,
            inputs: inputs.to_vec(),
            params,
        });
        id
    }

    pub fn input(&mut self) -> NodeId {
        self.add(NodeKind::Input, &[], Params::None)
    }

    pub fn finish(self, input_shape: Shape, outputs: Outputs) -> Result<Graph> {
        let input = self
            .nodes
            .iter()
            .find(|n| n.kind == NodeKind::Input)
            .map(|n| n.id)
            .ok_or_else(|| Error::InvalidGraph("no input node".into()))?;
        let g = Graph {
            nodes: self.nodes,
            input,
            outputs,
            input_shape,
        };
        validate(&g).into_result()?;
        Ok(g)
    }
}
