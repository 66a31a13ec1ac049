//! Post-training quantization.
//!
//! Calibration runs the FP32 graph over a calibration set and records the
//! observed range of every node output. Those ranges become per-tensor
//! activation [`QuantParams`]; weights are quantized symmetrically and biases
//! become 32-bit integers at scale `s_in * s_w`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId, NodeKind, Outputs, Params};
use crate::runtime::reference::forward_f32;
use crate::tensor::{
    quantize, FixedMultiplier, QuantParams, Shape, TensorF32, TensorI8, QMAX, QMIN,
};
use crate::{Error, Result};

/// Lower bound of the recommended calibration set size.
pub const CALIBRATION_MIN: usize = 100;
/// Upper bound of the recommended calibration set size.
pub const CALIBRATION_MAX: usize = 1000;
pub const HISTOGRAM_BINS: usize = 2048;
const PERCENTILE: f64 = 0.999;

/// Histogram of absolute activation values over `[0, max_abs]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    pub max_abs: f32,
    pub bins: Vec<u64>,
}

impl Histogram {
    pub fn new(max_abs: f32) -> Self {
        Self {
            max_abs,
            bins: alloc::vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn add(&mut self, values: &[f32]) {
        let scale = if self.max_abs > 0.0 {
            HISTOGRAM_BINS as f32 / self.max_abs
        } else {
            0.0
        };
        for &v in values {
            let b = ((libm::fabsf(v) * scale) as usize).min(HISTOGRAM_BINS - 1);
            self.bins[b] += 1;
        }
    }

    /// Adds `other`'s counts; both histograms must cover the same range.
    pub fn merge(&mut self, other: &Self) {
        debug_assert_eq!(self.max_abs, other.max_abs);
        for (x, y) in self.bins.iter_mut().zip(&other.bins) {
            *x += y;
        }
    }

    /// Upper edge of the bin where the cumulative count reaches `q`.
    pub fn percentile(&self, q: f64) -> f32 {
        let total: u64 = self.bins.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let target = libm::ceil(q * total as f64) as u64;
        let mut cum = 0;
        for (i, &c) in self.bins.iter().enumerate() {
            cum += c;
            if cum >= target {
                return (i + 1) as f32 * self.max_abs / HISTOGRAM_BINS as f32;
            }
        }
        self.max_abs
    }
}

/// Running range of one node output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationStats {
    pub min: f32,
    pub max: f32,
    /// Number of calibration images observed.
    pub count: u64,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub histogram: Option<Histogram>,
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            count: 0,
            histogram: None,
        }
    }
}

impl CalibrationStats {
    pub fn observe(&mut self, values: &[f32], images: u64) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += images;
    }

    /// Min of mins, max of maxes, sum of counts (and of histogram bins when
    /// both sides share a range).
    pub fn merge(&mut self, other: &Self) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        self.histogram = match (self.histogram.take(), &other.histogram) {
            (Some(mut a), Some(b)) if a.max_abs == b.max_abs => {
                a.merge(b);
                Some(a)
            }
            (None, Some(b)) => Some(b.clone()),
            (a, None) => a,
            (Some(_), Some(_)) => None,
        };
    }
}

pub type StatsMap = BTreeMap<NodeId, CalibrationStats>;

pub fn merge_stats(into: &mut StatsMap, other: &StatsMap) {
    for (id, s) in other {
        into.entry(*id).or_default().merge(s);
    }
}

pub fn check_calibration_size(n: usize, force: bool) -> Result<()> {
    if force || (CALIBRATION_MIN..=CALIBRATION_MAX).contains(&n) {
        Ok(())
    } else {
        Err(Error::CalibrationSize { got: n })
    }
}

/// Rejects graphs that still contain batch norms.
pub fn require_folded(g: &Graph) -> Result<()> {
    match g
        .nodes
        .iter()
        .find(|n| matches!(n.kind, NodeKind::BatchNorm { .. }))
    {
        Some(n) => Err(Error::InvalidGraph(alloc::format!(
            "batch norm {} must be folded before quantization",
            n.id
        ))),
        None => Ok(()),
    }
}

/// Range statistics from a single image (or a batch counted by its size).
pub fn observe_image(g: &Graph, image: &TensorF32) -> Result<StatsMap> {
    let images = image.shape().dims()[0] as u64;
    let mut stats = StatsMap::new();
    forward_f32(g, image, |id, t| {
        stats.entry(id).or_default().observe(t.data(), images)
    })?;
    Ok(stats)
}

/// Min/max statistics over a calibration set.
pub fn collect_calibration(g: &Graph, images: &[TensorF32], force: bool) -> Result<StatsMap> {
    check_calibration_size(images.len(), force)?;
    require_folded(g)?;
    let mut stats = StatsMap::new();
    for img in images {
        merge_stats(&mut stats, &observe_image(g, img)?);
    }
    Ok(stats)
}

/// Second calibration pass filling a fixed-range histogram per node, used by
/// [`Strategy::Percentile`]. Ranges come from a prior min/max pass.
pub fn collect_histograms(g: &Graph, images: &[TensorF32], stats: &mut StatsMap) -> Result<()> {
    let mut hists: BTreeMap<NodeId, Histogram> = stats
        .iter()
        .map(|(id, s)| (*id, Histogram::new(s.min.abs().max(s.max.abs()))))
        .collect();
    for img in images {
        forward_f32(g, img, |id, t| {
            if let Some(h) = hists.get_mut(&id) {
                h.add(t.data());
            }
        })?;
    }
    for (id, h) in hists {
        if let Some(s) = stats.get_mut(&id) {
            s.histogram = Some(h);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Strategy {
    #[default]
    MinMax,
    /// Clip the range at the 99.9th percentile of |x|.
    Percentile,
}

fn next_up(x: f32) -> f32 {
    f32::from_bits(x.to_bits() + 1)
}

/// Affine parameters whose dequantized range covers `[min, max]`.
pub fn minmax_qparams(min: f32, max: f32) -> QuantParams {
    let (mut scale, zp) = if min == max {
        (min.abs().max(1.0) * 2.0 / 255.0, 0)
    } else {
        let scale = (max - min) / 255.0;
        let zp = libm::round((QMIN as f32 - min / scale) as f64) as i64;
        // keep at least one step on each side that has data
        let lo = if min < 0.0 { QMIN + 1 } else { QMIN };
        let hi = if max > 0.0 { QMAX - 1 } else { QMAX };
        (scale, zp.clamp(lo as i64, hi as i64) as i32)
    };
    scale = scale.max(1e-12);
    // zero-point rounding can leave one end short by up to scale/2; widen
    if max > 0.0 && zp < QMAX {
        scale = scale.max(max / (QMAX - zp) as f32);
        while scale * ((QMAX - zp) as f32) < max {
            scale = next_up(scale);
        }
    }
    if min < 0.0 && zp > QMIN {
        scale = scale.max(min / (QMIN - zp) as f32);
        while scale * ((QMIN - zp) as f32) > min {
            scale = next_up(scale);
        }
    }
    QuantParams {
        scale,
        zero_point: zp,
    }
}

pub fn compute_qparams(stats: &CalibrationStats, strategy: Strategy) -> Result<QuantParams> {
    if stats.count == 0 || stats.min > stats.max {
        return Err(Error::EmptyStats {
            node: NodeId(u32::MAX),
        });
    }
    let (min, max) = match (strategy, &stats.histogram) {
        (Strategy::Percentile, Some(h)) => {
            let t = h.percentile(PERCENTILE);
            (stats.min.max(-t), stats.max.min(t))
        }
        (Strategy::Percentile, None) => {
            return Err(Error::InvalidConfig(
                "percentile strategy needs histogram statistics".into(),
            ))
        }
        (Strategy::MinMax, _) => (stats.min, stats.max),
    };
    Ok(minmax_qparams(min, max))
}

/// Fixed output parameters for probability heads: exactly covers [0, 1].
pub fn probability_qparams() -> QuantParams {
    QuantParams {
        scale: 1.0 / 255.0,
        zero_point: QMIN,
    }
}

/// Activation parameters for every node of a BN-folded graph.
///
/// Besides applying `strategy` to each node's statistics this arranges the
/// parameters the way integer kernels want them:
/// - a conv or dense consumed only by a ReLU shares the ReLU's parameters,
///   which makes the pair fusible without changing results;
/// - max-pool and upsample outputs reuse their input's parameters;
/// - sigmoid and softmax outputs use [`probability_qparams`].
pub fn activation_qparams(
    g: &Graph,
    stats: &StatsMap,
    strategy: Strategy,
) -> Result<BTreeMap<NodeId, QuantParams>> {
    require_folded(g)?;
    let consumers = g.consumers();
    let mut qps = BTreeMap::new();
    for n in &g.nodes {
        let qp = match n.kind {
            NodeKind::Sigmoid | NodeKind::SoftmaxPerPixel => probability_qparams(),
            NodeKind::MaxPool2d { .. } | NodeKind::Upsample2xNearest => qps[&n.inputs[0]],
            _ => {
                let s = stats.get(&n.id).ok_or(Error::EmptyStats { node: n.id })?;
                compute_qparams(s, strategy).map_err(|e| match e {
                    Error::EmptyStats { .. } => Error::EmptyStats { node: n.id },
                    e => e,
                })?
            }
        };
        qps.insert(n.id, qp);
    }
    for n in &g.nodes {
        if n.kind != NodeKind::Relu {
            continue;
        }
        let src = n.inputs[0];
        let producer = g.node(src).expect("validated");
        let sole = consumers[&src].len() == 1 && !g.is_output(src);
        if sole
            && matches!(
                producer.kind,
                NodeKind::Conv2d { .. } | NodeKind::Dense { .. }
            )
        {
            let relu_qp = qps[&n.id];
            qps.insert(src, relu_qp);
        }
    }
    Ok(qps)
}

/// Calibrates a BN-folded graph and quantizes it in one step.
pub fn calibrate_and_quantize(
    g: &Graph,
    images: &[TensorF32],
    strategy: Strategy,
    force: bool,
) -> Result<QuantizedGraph> {
    let mut stats = collect_calibration(g, images, force)?;
    if strategy == Strategy::Percentile {
        collect_histograms(g, images, &mut stats)?;
    }
    let qps = activation_qparams(g, &stats, strategy)?;
    quantize_graph(g, &qps)
}

/// Symmetric INT8 weights and 32-bit biases at scale `s_in * s_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantWeights {
    pub weight: TensorI8,
    pub bias: Vec<i32>,
}

/// Activation applied inside a producer node after fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum Fusion {
    None,
    /// `max(q, zp_out)` on the requantized output.
    Relu,
    /// Requantize to `pre`, then apply the sigmoid lookup table.
    Sigmoid {
        pre: QuantParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub weights: Option<QuantWeights>,
    pub out_qp: QuantParams,
    pub fusion: Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGraph {
    pub nodes: Vec<QNode>,
    pub input: NodeId,
    pub outputs: Outputs,
    pub input_shape: Shape,
}

impl QuantizedGraph {
    pub fn node(&self, id: NodeId) -> Option<&QNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.node(self.input).expect("input exists").out_qp
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.mask == id || self.outputs.class == Some(id)
    }

    pub fn output_ids(&self) -> Vec<NodeId> {
        let mut v = alloc::vec![self.outputs.mask];
        v.extend(self.outputs.class);
        v
    }

    pub fn consumers(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                map.entry(*i).or_default().push(n.id);
            }
        }
        map
    }

    /// Output shapes for a given batch size.
    pub fn infer_shapes(&self, batch: usize) -> Result<BTreeMap<NodeId, Shape>> {
        let mut shapes: BTreeMap<NodeId, Shape> = BTreeMap::new();
        for n in &self.nodes {
            let s = match n.kind {
                NodeKind::Input => self.input_shape.with_batch(batch)?,
                _ => {
                    let ins: Vec<&Shape> = n
                        .inputs
                        .iter()
                        .map(|i| {
                            shapes.get(i).ok_or_else(|| {
                                Error::InvalidGraph(alloc::format!(
                                    "{} reads unknown node {i}",
                                    n.id
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    crate::graph::node_output_shape(&n.as_shape_node(), &ins)?
                }
            };
            shapes.insert(n.id, s);
        }
        Ok(shapes)
    }
}

impl QNode {
    /// FP32 view with zero-valued parameters of the right shapes, for reuse of
    /// graph shape inference.
    fn as_shape_node(&self) -> crate::graph::Node {
        let params = match (&self.kind, &self.weights) {
            (NodeKind::Conv2d { .. }, Some(w)) => Params::Conv {
                weight: TensorF32::zeros(w.weight.shape().clone()),
                bias: TensorF32::zeros(Shape::new(alloc::vec![w.bias.len()]).expect("nonempty")),
            },
            (NodeKind::Dense { .. }, Some(w)) => Params::Dense {
                weight: TensorF32::zeros(w.weight.shape().clone()),
                bias: TensorF32::zeros(Shape::new(alloc::vec![w.bias.len()]).expect("nonempty")),
            },
            _ => Params::None,
        };
        crate::graph::Node {
            id: self.id,
            kind: self.kind,
            inputs: self.inputs.clone(),
            params,
        }
    }

    pub fn weight_scale(&self) -> Option<f32> {
        self.weights.as_ref().map(|w| w.weight.qparams().scale)
    }
}

/// Symmetric per-tensor weight parameters: `scale = max|w| / 127`, `zp = 0`.
pub fn weight_qparams(w: &TensorF32) -> QuantParams {
    let max_abs = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 {
        max_abs / QMAX as f32
    } else {
        1.0
    };
    QuantParams {
        scale,
        zero_point: 0,
    }
}

fn quantize_weights(weight: &TensorF32, bias: &TensorF32, in_scale: f32) -> Result<QuantWeights> {
    let wq = weight_qparams(weight);
    let weight = quantize(weight, wq)?;
    let bias_scale = in_scale as f64 * wq.scale as f64;
    let bias = bias
        .data()
        .iter()
        .map(|&b| libm::round(b as f64 / bias_scale).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect();
    Ok(QuantWeights { weight, bias })
}

/// Quantizes a BN-folded graph with the given activation parameters.
pub fn quantize_graph(
    g: &Graph,
    qparams: &BTreeMap<NodeId, QuantParams>,
) -> Result<QuantizedGraph> {
    require_folded(g)?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        let out_qp = *qparams
            .get(&n.id)
            .ok_or(Error::MissingQuantParams { node: n.id })?;
        out_qp.validate()?;
        let weights = match &n.params {
            Params::Conv { weight, bias } | Params::Dense { weight, bias } => {
                let in_qp = qparams
                    .get(&n.inputs[0])
                    .ok_or(Error::MissingQuantParams { node: n.inputs[0] })?;
                Some(quantize_weights(weight, bias, in_qp.scale)?)
            }
            Params::None => None,
            Params::BatchNorm { .. } => unreachable!("checked by require_folded"),
        };
        nodes.push(QNode {
            id: n.id,
            kind: n.kind,
            inputs: n.inputs.clone(),
            weights,
            out_qp,
            fusion: Fusion::None,
        });
    }
    Ok(QuantizedGraph {
        nodes,
        input: g.input,
        outputs: g.outputs,
        input_shape: g.input_shape.clone(),
    })
}

/// Multiplier taking accumulator units `s_in * s_w` to output units.
pub fn accumulator_multiplier(in_scale: f32, w_scale: f32, out_scale: f32) -> FixedMultiplier {
    FixedMultiplier::from_real(in_scale as f64 * w_scale as f64 / out_scale as f64)
}
