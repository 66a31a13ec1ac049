//! Lowering of graphs to executable plans.
//!
//! Passes, in order of use:
//! - [`fold_batchnorm`] on the FP32 graph, before calibration;
//! - [`fuse`] on the quantized graph (conv+bias+ReLU, dense+sigmoid);
//! - [`compile`]: stage scheduling, lifetime-based buffer reuse and packing of
//!   parameters into [`Instruction`]s.

pub mod memory;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId, NodeKind, Params};
use crate::quantizer::{accumulator_multiplier, Fusion, QNode, QuantizedGraph};
use crate::tensor::{FixedMultiplier, QuantParams, Shape, TensorF32};
use crate::{Error, Result};

use memory::{assign_slots, peak_live_bytes, Lifetime};

/// Largest batch a plan executes at once.
pub const MAX_BATCH: usize = 8;

/// Folds every batch norm into the convolution feeding it.
pub fn fold_batchnorm(g: &Graph) -> Result<Graph> {
    let consumers = g.consumers();
    let mut folded: BTreeMap<NodeId, (TensorF32, TensorF32)> = BTreeMap::new();
    let mut rename: BTreeMap<NodeId, NodeId> = BTreeMap::new();

    for n in &g.nodes {
        let (
            NodeKind::BatchNorm { eps },
            Params::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            },
        ) = (n.kind, &n.params)
        else {
            continue;
        };
        let src = n.inputs[0];
        let producer = g
            .node(src)
            .ok_or(Error::BatchNormNotFoldable { node: n.id })?;
        let foldable = matches!(producer.kind, NodeKind::Conv2d { .. })
            && consumers[&src].len() == 1
            && !g.is_output(src)
            && !folded.contains_key(&src);
        let Params::Conv { weight, bias } = &producer.params else {
            return Err(Error::BatchNormNotFoldable { node: n.id });
        };
        if !foldable {
            return Err(Error::BatchNormNotFoldable { node: n.id });
        }
        let out_c = bias.data().len();
        let per_oc = weight.data().len() / out_c;
        let mut w = weight.data().to_vec();
        let mut b = bias.data().to_vec();
        for oc in 0..out_c {
            let k = gamma.data()[oc] as f64 / libm::sqrt(var.data()[oc] as f64 + eps as f64);
            for v in &mut w[oc * per_oc..(oc + 1) * per_oc] {
                *v = (*v as f64 * k) as f32;
            }
            b[oc] = ((b[oc] as f64 - mean.data()[oc] as f64) * k + beta.data()[oc] as f64) as f32;
        }
        folded.insert(
            src,
            (
                TensorF32::new(weight.shape().clone(), w)?,
                TensorF32::new(bias.shape().clone(), b)?,
            ),
        );
        rename.insert(n.id, src);
    }

    let resolve = |id: NodeId| rename.get(&id).copied().unwrap_or(id);
    let nodes = g
        .nodes
        .iter()
        .filter(|n| !rename.contains_key(&n.id))
        .map(|n| {
            let mut n = n.clone();
            for i in &mut n.inputs {
                *i = resolve(*i);
            }
            if let Some((weight, bias)) = folded.remove(&n.id) {
                n.params = Params::Conv { weight, bias };
            }
            n
        })
        .collect();
    let mut outputs = g.outputs;
    outputs.mask = resolve(outputs.mask);
    outputs.class = outputs.class.map(resolve);
    Ok(Graph {
        nodes,
        input: g.input,
        outputs,
        input_shape: g.input_shape.clone(),
    })
}

fn fusible(
    producer: &QNode,
    activation: &QNode,
    sole_consumer: bool,
    is_output: bool,
) -> Option<Fusion> {
    if !sole_consumer || is_output || producer.fusion != Fusion::None {
        return None;
    }
    match (producer.kind, activation.kind) {
        (NodeKind::Conv2d { .. }, NodeKind::Relu) if producer.out_qp == activation.out_qp => {
            Some(Fusion::Relu)
        }
        (NodeKind::Dense { .. }, NodeKind::Sigmoid) => Some(Fusion::Sigmoid {
            pre: producer.out_qp,
        }),
        _ => None,
    }
}

/// Collapses conv+bias+ReLU and dense+sigmoid pairs into single nodes. The
/// fused node keeps the activation's id and position.
pub fn fuse(qg: &QuantizedGraph) -> QuantizedGraph {
    let consumers = qg.consumers();
    let mut absorbed: BTreeMap<NodeId, ()> = BTreeMap::new();
    let mut replacement: BTreeMap<NodeId, QNode> = BTreeMap::new();
    for n in &qg.nodes {
        if !matches!(n.kind, NodeKind::Relu | NodeKind::Sigmoid) {
            continue;
        }
        let src = n.inputs[0];
        let Some(producer) = qg.node(src) else {
            continue;
        };
        let sole = consumers[&src].len() == 1;
        if let Some(fusion) = fusible(producer, n, sole, qg.is_output(src)) {
            absorbed.insert(src, ());
            replacement.insert(
                n.id,
                QNode {
                    id: n.id,
                    kind: producer.kind,
                    inputs: producer.inputs.clone(),
                    weights: producer.weights.clone(),
                    out_qp: n.out_qp,
                    fusion,
                },
            );
        }
    }
    let nodes = qg
        .nodes
        .iter()
        .filter(|n| !absorbed.contains_key(&n.id))
        .map(|n| replacement.remove(&n.id).unwrap_or_else(|| n.clone()))
        .collect();
    QuantizedGraph {
        nodes,
        input: qg.input,
        outputs: qg.outputs,
        input_shape: qg.input_shape.clone(),
    }
}

pub type BufferId = usize;

/// Per-image dimensions (C, H, W); rank-2 values are (F, 1, 1).
pub type Dims = [usize; 3];

fn dims_of(shape: &Shape) -> Dims {
    match *shape.dims() {
        [_, c, h, w] => [c, h, w],
        [_, f] => [f, 1, 1],
        _ => [shape.volume() / shape.dims()[0], 1, 1],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OpCode {
    Conv {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Upsample,
    Concat,
    GlobalAvgPool,
    Dense {
        sigmoid: bool,
    },
    Relu,
    Sigmoid,
    Softmax,
}

impl OpCode {
    pub fn name(&self) -> &'static str {
        match self {
            OpCode::Conv { relu: true, .. } => "ConvBiasReLU-INT8",
            OpCode::Conv { relu: false, .. } => "ConvBias-INT8",
            OpCode::MaxPool { .. } => "MaxPool-INT8",
            OpCode::Upsample => "Upsample",
            OpCode::Concat => "Concat",
            OpCode::GlobalAvgPool => "GlobalAvgPool-INT8",
            OpCode::Dense { sigmoid: true } => "DenseSigmoid",
            OpCode::Dense { sigmoid: false } => "Dense-INT8",
            OpCode::Relu => "ReLU-INT8",
            OpCode::Sigmoid => "Sigmoid-LUT",
            OpCode::Softmax => "Softmax",
        }
    }
}

/// A real rescaling ratio and its fixed-point realization.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Requant {
    pub ratio: f64,
    pub fixed: FixedMultiplier,
}

impl Requant {
    pub fn new(ratio: f64) -> Self {
        Self {
            ratio,
            fixed: FixedMultiplier::from_real(ratio),
        }
    }
}

/// Packed parameters of a weighted instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedParams {
    /// Row-major (out, k) with k = in_c * kh * kw; widened for i16 dot products.
    pub weights: Vec<i16>,
    pub bias: Vec<i32>,
    /// 256-entry table indexed by `q + 128`.
    pub lut: Option<Vec<i8>>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Instruction {
    /// Graph node this instruction computes (after fusion).
    pub node: NodeId,
    pub op: OpCode,
    /// Nodes whose values are read, parallel to `inputs`.
    pub sources: Vec<NodeId>,
    pub inputs: Vec<BufferId>,
    pub output: BufferId,
    pub in_dims: Vec<Dims>,
    pub out_dims: Dims,
    pub in_qparams: Vec<QuantParams>,
    pub out_qparams: QuantParams,
    /// Parameters of the dense output ahead of a fused sigmoid table.
    pub pre_activation: Option<QuantParams>,
    /// One entry for accumulator ops; one per input for rescaling copies.
    pub requant: Vec<Requant>,
    /// Index into [`Plan::params`].
    #[cfg_attr(feature = "serde", serde(skip))]
    pub params: Option<usize>,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PlanBuffer {
    pub id: BufferId,
    pub bytes: usize,
}

/// Where a graph output lives after execution.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct OutputSlot {
    pub node: NodeId,
    pub buffer: BufferId,
    pub dims: Dims,
    /// Rank of the batched tensor: 4 for (N, C, H, W), 2 for (N, F).
    pub rank: usize,
    pub qparams: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Plan {
    pub instructions: Vec<Instruction>,
    /// Physical buffers after reuse, sized for [`MAX_BATCH`] images.
    pub buffers: Vec<PlanBuffer>,
    /// Buffer holding each node's value.
    pub values: BTreeMap<NodeId, BufferId>,
    pub input_buffer: BufferId,
    pub input_dims: Dims,
    pub input_qparams: QuantParams,
    pub mask_output: OutputSlot,
    pub class_output: Option<OutputSlot>,
    pub stages: usize,
    /// Largest total size of simultaneously live values.
    pub peak_memory: usize,
    /// Total size if every value had its own buffer.
    pub unshared_bytes: usize,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub params: Vec<PackedParams>,
}

impl Plan {
    pub fn arena_bytes(&self) -> usize {
        self.buffers.iter().map(|b| b.bytes).sum()
    }

    /// Instructions grouped by stage, in stage order.
    pub fn stage_groups(&self) -> Vec<&[Instruction]> {
        let mut groups = Vec::with_capacity(self.stages);
        let mut start = 0;
        while start < self.instructions.len() {
            let stage = self.instructions[start].stage;
            let len = self.instructions[start..]
                .iter()
                .take_while(|i| i.stage == stage)
                .count();
            groups.push(&self.instructions[start..start + len]);
            start += len;
        }
        groups
    }

    pub fn opcode_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for i in &self.instructions {
            *h.entry(String::from(i.op.name())).or_default() += 1;
        }
        h
    }
}

/// 256-entry table for `quantize_out(sigmoid(dequantize_in(q)))`.
pub fn sigmoid_lut(in_qp: QuantParams, out_qp: QuantParams) -> Vec<i8> {
    (-128i32..=127)
        .map(|q| {
            let x = in_qp.dequantize_value(q as i8);
            out_qp.quantize_value(crate::runtime::reference::sigmoid(x))
        })
        .collect()
}

fn opcode_for(n: &QNode) -> Result<OpCode> {
    Ok(match n.kind {
        NodeKind::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => OpCode::Conv {
            kernel,
            stride,
            padding,
            relu: n.fusion == Fusion::Relu,
        },
        NodeKind::MaxPool2d { kernel, stride } => OpCode::MaxPool { kernel, stride },
        NodeKind::Upsample2xNearest => OpCode::Upsample,
        NodeKind::Concat => OpCode::Concat,
        NodeKind::GlobalAvgPool => OpCode::GlobalAvgPool,
        NodeKind::Dense { .. } => OpCode::Dense {
            sigmoid: matches!(n.fusion, Fusion::Sigmoid { .. }),
        },
        NodeKind::Relu => OpCode::Relu,
        NodeKind::Sigmoid => OpCode::Sigmoid,
        NodeKind::SoftmaxPerPixel => OpCode::Softmax,
        NodeKind::Input | NodeKind::BatchNorm { .. } => {
            return Err(Error::InvalidGraph(alloc::format!(
                "node {} ({}) cannot be lowered",
                n.id,
                n.kind.name()
            )))
        }
    })
}

/// Fuses, schedules and plans memory for a quantized graph.
pub fn compile(qg: &QuantizedGraph) -> Result<Plan> {
    let qg = fuse(qg);
    let shapes = qg.infer_shapes(1)?;

    // stage = 1 + deepest input; the graph input is stage 0
    let mut stage_of: BTreeMap<NodeId, usize> = BTreeMap::new();
    for n in &qg.nodes {
        let s = if n.kind == NodeKind::Input {
            0
        } else {
            let mut s = 0;
            for i in &n.inputs {
                let si = stage_of.get(i).ok_or(Error::Cycle { node: n.id })?;
                s = s.max(si + 1);
            }
            s
        };
        stage_of.insert(n.id, s);
    }
    let stages = stage_of.values().copied().max().unwrap_or(0);

    let consumers = qg.consumers();
    let ids: Vec<NodeId> = qg.nodes.iter().map(|n| n.id).collect();
    let lifetimes: Vec<Lifetime> = qg
        .nodes
        .iter()
        .map(|n| {
            let death = if qg.is_output(n.id) {
                usize::MAX
            } else {
                consumers[&n.id]
                    .iter()
                    .map(|c| stage_of[c])
                    .max()
                    .unwrap_or(stage_of[&n.id])
            };
            Lifetime {
                birth: stage_of[&n.id],
                death,
                bytes: shapes[&n.id].volume() * MAX_BATCH,
            }
        })
        .collect();
    let assignment = assign_slots(&lifetimes);
    let values: BTreeMap<NodeId, BufferId> = ids
        .iter()
        .zip(&assignment.slot_of)
        .map(|(id, slot)| (*id, *slot))
        .collect();

    let mut order: Vec<&QNode> = qg
        .nodes
        .iter()
        .filter(|n| n.kind != NodeKind::Input)
        .collect();
    order.sort_by_key(|n| stage_of[&n.id]);

    let mut params = Vec::new();
    let mut instructions = Vec::with_capacity(order.len());
    for n in order {
        let op = opcode_for(n)?;
        let in_qparams: Vec<QuantParams> = n
            .inputs
            .iter()
            .map(|i| qg.node(*i).expect("validated").out_qp)
            .collect();
        let out_dims = dims_of(&shapes[&n.id]);
        let in_dims: Vec<Dims> = n.inputs.iter().map(|i| dims_of(&shapes[i])).collect();
        let accum_out = match n.fusion {
            Fusion::Sigmoid { pre } => pre,
            _ => n.out_qp,
        };
        let requant = match op {
            OpCode::Conv { .. } | OpCode::Dense { .. } => {
                let ws = n.weight_scale().expect("weighted node");
                let m = accumulator_multiplier(in_qparams[0].scale, ws, accum_out.scale);
                alloc::vec![Requant {
                    ratio: in_qparams[0].scale as f64 * ws as f64 / accum_out.scale as f64,
                    fixed: m,
                }]
            }
            OpCode::GlobalAvgPool => {
                let [_, h, w] = in_dims[0];
                alloc::vec![Requant::new(
                    in_qparams[0].scale as f64 / (n.out_qp.scale as f64 * (h * w) as f64)
                )]
            }
            OpCode::MaxPool { .. } | OpCode::Upsample | OpCode::Concat | OpCode::Relu => in_qparams
                .iter()
                .map(|q| Requant::new(q.scale as f64 / n.out_qp.scale as f64))
                .collect(),
            OpCode::Sigmoid | OpCode::Softmax => Vec::new(),
        };
        let packed = match op {
            OpCode::Conv { .. } | OpCode::Dense { .. } => {
                let w = n.weights.as_ref().expect("weighted node");
                Some(PackedParams {
                    weights: w.weight.data().iter().map(|&v| v as i16).collect(),
                    bias: w.bias.clone(),
                    lut: match n.fusion {
                        Fusion::Sigmoid { pre } => Some(sigmoid_lut(pre, n.out_qp)),
                        _ => None,
                    },
                })
            }
            OpCode::Sigmoid => Some(PackedParams {
                weights: Vec::new(),
                bias: Vec::new(),
                lut: Some(sigmoid_lut(in_qparams[0], n.out_qp)),
            }),
            _ => None,
        };
        let params_idx = packed.map(|p| {
            params.push(p);
            params.len() - 1
        });
        instructions.push(Instruction {
            node: n.id,
            op,
            sources: n.inputs.clone(),
            inputs: n.inputs.iter().map(|i| values[i]).collect(),
            output: values[&n.id],
            in_dims,
            out_dims,
            in_qparams,
            out_qparams: n.out_qp,
            pre_activation: match n.fusion {
                Fusion::Sigmoid { pre } => Some(pre),
                _ => None,
            },
            requant,
            params: params_idx,
            stage: stage_of[&n.id],
        });
    }

    let out_info = |id: NodeId| OutputSlot {
        node: id,
        buffer: values[&id],
        dims: dims_of(&shapes[&id]),
        rank: shapes[&id].rank(),
        qparams: qg.node(id).expect("output").out_qp,
    };
    Ok(Plan {
        instructions,
        buffers: assignment
            .slot_bytes
            .iter()
            .enumerate()
            .map(|(id, &bytes)| PlanBuffer { id, bytes })
            .collect(),
        input_buffer: values[&qg.input],
        input_dims: dims_of(&shapes[&qg.input]),
        input_qparams: qg.input_qparams(),
        mask_output: out_info(qg.outputs.mask),
        class_output: qg.outputs.class.map(out_info),
        values,
        stages,
        peak_memory: peak_live_bytes(&lifetimes, stages),
        unshared_bytes: lifetimes.iter().map(|l| l.bytes).sum(),
        params,
    })
}
