//! INT8 semantics shared by every execution route, and a naive node-by-node
//! interpreter over quantized graphs that serves as the oracle for compiled
//! plans.
//!
//! Per-element rules (q: stored value, zp: zero point):
//! - accumulator ops: `acc = bias + sum w * (q - zp_in)`, requantized with the
//!   node's fixed-point multiplier;
//! - fused ReLU: `max(q_out, zp_out)`;
//! - copies between different parameters: `requantize(q - zp_in)` with
//!   multiplier `s_in / s_out`, identity when parameters are equal;
//! - sigmoid: 256-entry table; softmax: dequantize, softmax, quantize.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::compiler::{sigmoid_lut, Requant};
use crate::graph::{NodeId, NodeKind};
use crate::quantizer::{accumulator_multiplier, Fusion, QNode, QuantizedGraph};
use crate::runtime::reference::softmax_in_place;
use crate::tensor::{QuantParams, Shape, TensorI8};
use crate::{Error, Result};

/// Moves `q` from `from` to `to` parameters.
#[inline]
pub(crate) fn rescale(q: i8, from: QuantParams, to: QuantParams, r: &Requant) -> i8 {
    if from == to {
        q
    } else {
        r.fixed
            .requantize(q as i32 - from.zero_point, to.zero_point)
    }
}

/// Softmax over `c` channels of one pixel, in place. `stride` separates
/// channels in `data`.
#[inline]
pub(crate) fn softmax_pixel(
    data: &mut [i8],
    base: usize,
    stride: usize,
    scratch: &mut [f32],
    from: QuantParams,
    to: QuantParams,
) {
    for (ch, s) in scratch.iter_mut().enumerate() {
        *s = from.dequantize_value(data[base + ch * stride]);
    }
    softmax_in_place(scratch);
    for (ch, s) in scratch.iter().enumerate() {
        data[base + ch * stride] = to.quantize_value(*s);
    }
}

/// Applies the accumulator epilogue of a weighted node.
#[inline]
pub(crate) fn finish_acc(
    acc: i32,
    r: &Requant,
    out: QuantParams,
    fusion: Fusion,
    lut: Option<&[i8]>,
) -> i8 {
    match fusion {
        Fusion::None => r.fixed.requantize(acc, out.zero_point),
        Fusion::Relu => r
            .fixed
            .requantize(acc, out.zero_point)
            .max(out.zero_point as i8),
        Fusion::Sigmoid { pre } => {
            let p = r.fixed.requantize(acc, pre.zero_point);
            lut.expect("sigmoid fusion carries a table")[(p as i32 + 128) as usize]
        }
    }
}

/// Runs `qg` node by node on `batch`, returning every graph output.
pub fn interpret_int8(qg: &QuantizedGraph, batch: &TensorI8) -> Result<BTreeMap<NodeId, TensorI8>> {
    let n = batch.shape().dims()[0];
    let expected = qg.input_shape.with_batch(n)?;
    if batch.shape() != &expected {
        return Err(Error::ShapeMismatch {
            node: qg.input,
            expected,
            found: batch.shape().clone(),
        });
    }
    if batch.qparams() != qg.input_qparams() {
        return Err(Error::QuantParamsMismatch);
    }
    let shapes = qg.infer_shapes(n)?;
    let mut values: BTreeMap<NodeId, TensorI8> = BTreeMap::new();
    for node in &qg.nodes {
        let out = if node.kind == NodeKind::Input {
            batch.clone()
        } else {
            let ins: Vec<&TensorI8> = node.inputs.iter().map(|i| &values[i]).collect();
            eval_qnode(node, &ins, shapes[&node.id].clone())
        };
        values.insert(node.id, out);
    }
    Ok(qg
        .output_ids()
        .into_iter()
        .map(|id| (id, values[&id].clone()))
        .collect())
}

fn eval_qnode(node: &QNode, ins: &[&TensorI8], out_shape: Shape) -> TensorI8 {
    let out_qp = node.out_qp;
    let x = ins[0];
    let in_qp = x.qparams();
    let copy_r = |from: QuantParams| Requant::new(from.scale as f64 / out_qp.scale as f64);
    let n = out_shape.dims()[0];
    let data: Vec<i8> = match node.kind {
        NodeKind::Conv2d {
            kernel: (kh, kw),
            stride,
            padding,
            ..
        } => {
            let w = node.weights.as_ref().expect("conv has weights");
            let r = acc_requant(node, in_qp);
            let lut = lut_for(node);
            let (_, cin, h, wd) = x.shape().as_nchw().expect("nchw");
            let (_, cout, oh, ow) = out_shape.as_nchw().expect("nchw");
            let mut out = Vec::with_capacity(out_shape.volume());
            for b in 0..n {
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: i32 = 0;
                            for ic in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let q = x.data()
                                            [((b * cin + ic) * h + iy as usize) * wd + ix as usize];
                                        let wv =
                                            w.weight.data()[((oc * cin + ic) * kh + ky) * kw + kx];
                                        acc += wv as i32 * (q as i32 - in_qp.zero_point);
                                    }
                                }
                            }
                            out.push(finish_acc(
                                w.bias[oc].saturating_add(acc),
                                &r,
                                out_qp,
                                node.fusion,
                                lut.as_deref(),
                            ));
                        }
                    }
                }
            }
            out
        }
        NodeKind::Dense { out_features } => {
            let w = node.weights.as_ref().expect("dense has weights");
            let r = acc_requant(node, in_qp);
            let lut = lut_for(node);
            let fin = x.shape().volume() / n;
            let mut out = Vec::with_capacity(n * out_features);
            for row in x.data().chunks_exact(fin) {
                for o in 0..out_features {
                    let mut acc: i32 = 0;
                    for (k, &q) in row.iter().enumerate() {
                        acc += w.weight.data()[o * fin + k] as i32 * (q as i32 - in_qp.zero_point);
                    }
                    out.push(finish_acc(
                        w.bias[o].saturating_add(acc),
                        &r,
                        out_qp,
                        node.fusion,
                        lut.as_deref(),
                    ));
                }
            }
            out
        }
        NodeKind::Relu => {
            let r = copy_r(in_qp);
            x.data()
                .iter()
                .map(|&q| rescale(q, in_qp, out_qp, &r).max(out_qp.zero_point as i8))
                .collect()
        }
        NodeKind::Sigmoid => {
            let lut = sigmoid_lut(in_qp, out_qp);
            x.data()
                .iter()
                .map(|&q| lut[(q as i32 + 128) as usize])
                .collect()
        }
        NodeKind::MaxPool2d { kernel, stride } => {
            let r = copy_r(in_qp);
            let (_, _, h, w) = x.shape().as_nchw().expect("nchw");
            let (_, _, oh, ow) = out_shape.as_nchw().expect("nchw");
            let mut out = Vec::with_capacity(out_shape.volume());
            for plane in x.data().chunks_exact(h * w) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = i8::MIN;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                            }
                        }
                        out.push(rescale(m, in_qp, out_qp, &r));
                    }
                }
            }
            out
        }
        NodeKind::Upsample2xNearest => {
            let r = copy_r(in_qp);
            let (_, _, h, w) = x.shape().as_nchw().expect("nchw");
            let mut out = Vec::with_capacity(out_shape.volume());
            for plane in x.data().chunks_exact(h * w) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out.push(rescale(plane[(y / 2) * w + xx / 2], in_qp, out_qp, &r));
                    }
                }
            }
            out
        }
        NodeKind::Concat => {
            let mut out = Vec::with_capacity(out_shape.volume());
            for b in 0..n {
                for t in ins {
                    let per = t.shape().volume() / n;
                    let r = copy_r(t.qparams());
                    out.extend(
                        t.data()[b * per..(b + 1) * per]
                            .iter()
                            .map(|&q| rescale(q, t.qparams(), out_qp, &r)),
                    );
                }
            }
            out
        }
        NodeKind::GlobalAvgPool => {
            let (_, _, h, w) = x.shape().as_nchw().expect("nchw");
            let r = Requant::new(in_qp.scale as f64 / (out_qp.scale as f64 * (h * w) as f64));
            x.data()
                .chunks_exact(h * w)
                .map(|p| {
                    let acc: i32 = p.iter().map(|&q| q as i32 - in_qp.zero_point).sum();
                    r.fixed.requantize(acc, out_qp.zero_point)
                })
                .collect()
        }
        NodeKind::SoftmaxPerPixel => {
            let (_, c, h, w) = x.shape().as_nchw().expect("nchw");
            let mut out = x.data().to_vec();
            let mut scratch = alloc::vec![0.0f32; c];
            for b in 0..n {
                for p in 0..h * w {
                    softmax_pixel(
                        &mut out,
                        b * c * h * w + p,
                        h * w,
                        &mut scratch,
                        in_qp,
                        out_qp,
                    );
                }
            }
            out
        }
        NodeKind::Input | NodeKind::BatchNorm { .. } => {
            unreachable!("not present in quantized graphs")
        }
    };
    TensorI8::new(out_shape, data, out_qp).expect("shape computed by inference")
}

fn acc_requant(node: &QNode, in_qp: QuantParams) -> Requant {
    let ws = node.weight_scale().expect("weighted node");
    let target = match node.fusion {
        Fusion::Sigmoid { pre } => pre,
        _ => node.out_qp,
    };
    Requant {
        ratio: in_qp.scale as f64 * ws as f64 / target.scale as f64,
        fixed: accumulator_multiplier(in_qp.scale, ws, target.scale),
    }
}

fn lut_for(node: &QNode) -> Option<Vec<i8>> {
    match node.fusion {
        Fusion::Sigmoid { pre } => Some(sigmoid_lut(pre, node.out_qp)),
        _ => None,
    }
}
