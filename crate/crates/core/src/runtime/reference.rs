//! FP32 reference interpreter: unfused, node by node, textbook semantics.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::graph::{infer_shapes, Graph, NodeId, NodeKind, Params};
use crate::tensor::{Shape, TensorF32};
use crate::{Error, Result};

/// Runs `g` on `batch` (N, C, H, W), calling `observe` with every node output
/// as soon as it is computed. Returns the graph outputs.
pub fn forward_f32<F>(
    g: &Graph,
    batch: &TensorF32,
    mut observe: F,
) -> Result<BTreeMap<NodeId, TensorF32>>
where
    F: FnMut(NodeId, &TensorF32),
{
    let n = batch.shape().dims()[0];
    let expected = g.input_shape.with_batch(n)?;
    if batch.shape() != &expected {
        return Err(Error::ShapeMismatch {
            node: g.input,
            expected,
            found: batch.shape().clone(),
        });
    }
    let shapes = infer_shapes(g, &expected)?;

    let mut remaining: BTreeMap<NodeId, usize> = BTreeMap::new();
    for node in &g.nodes {
        for i in &node.inputs {
            *remaining.entry(*i).or_default() += 1;
        }
    }
    let mut values: BTreeMap<NodeId, TensorF32> = BTreeMap::new();
    for node in &g.nodes {
        let out_shape = shapes[&node.id].clone();
        let out = if node.kind == NodeKind::Input {
            batch.clone()
        } else {
            let ins: Vec<&TensorF32> = node.inputs.iter().map(|i| &values[i]).collect();
            eval_node(&node.kind, &node.params, &ins, out_shape)
        };
        observe(node.id, &out);
        values.insert(node.id, out);
        for i in &node.inputs {
            let r = remaining.get_mut(i).expect("counted above");
            *r -= 1;
            if *r == 0 && !g.is_output(*i) {
                values.remove(i);
            }
        }
    }
    Ok(g.output_ids()
        .into_iter()
        .map(|id| (id, values[&id].clone()))
        .collect())
}

pub(crate) fn eval_node(
    kind: &NodeKind,
    params: &Params,
    ins: &[&TensorF32],
    out_shape: Shape,
) -> TensorF32 {
    let x = ins[0];
    let data = match (*kind, params) {
        (
            NodeKind::Conv2d {
                kernel: (kh, kw),
                stride,
                padding,
                ..
            },
            Params::Conv { weight, bias },
        ) => conv2d(x, weight, bias, kh, kw, stride, padding, &out_shape),
        (
            NodeKind::BatchNorm { eps },
            Params::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            },
        ) => {
            let (_, c, h, w) = x.shape().as_nchw().expect("validated");
            let plane = h * w;
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / plane) % c;
                    let inv = 1.0 / libm::sqrtf(var.data()[ch] + eps);
                    gamma.data()[ch] * (v - mean.data()[ch]) * inv + beta.data()[ch]
                })
                .collect()
        }
        (NodeKind::Relu, _) => x.data().iter().map(|&v| v.max(0.0)).collect(),
        (NodeKind::Sigmoid, _) => x.data().iter().map(|&v| sigmoid(v)).collect(),
        (NodeKind::MaxPool2d { kernel, stride }, _) => max_pool(x, kernel, stride, &out_shape),
        (NodeKind::Upsample2xNearest, _) => {
            let (n, c, h, w) = x.shape().as_nchw().expect("validated");
            let mut out = Vec::with_capacity(n * c * h * w * 4);
            for plane in x.data().chunks_exact(h * w) {
                for y in 0..2 * h {
                    let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
            out
        }
        (NodeKind::Concat, _) => {
            let n = out_shape.dims()[0];
            let mut out = Vec::with_capacity(out_shape.volume());
            for b in 0..n {
                for t in ins {
                    let per = t.shape().volume() / n;
                    out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                }
            }
            out
        }
        (NodeKind::GlobalAvgPool, _) => {
            let (_, _, h, w) = x.shape().as_nchw().expect("validated");
            x.data()
                .chunks_exact(h * w)
                .map(|p| p.iter().sum::<f32>() / (h * w) as f32)
                .collect()
        }
        (NodeKind::Dense { out_features }, Params::Dense { weight, bias }) => {
            let n = x.shape().dims()[0];
            let fin = x.shape().volume() / n;
            let mut out = Vec::with_capacity(n * out_features);
            for row in x.data().chunks_exact(fin) {
                for o in 0..out_features {
                    let wr = &weight.data()[o * fin..(o + 1) * fin];
                    let dot: f32 = wr.iter().zip(row).map(|(a, b)| a * b).sum();
                    out.push(dot + bias.data()[o]);
                }
            }
            out
        }
        (NodeKind::SoftmaxPerPixel, _) => {
            let (n, c, h, w) = x.shape().as_nchw().expect("validated");
            let plane = h * w;
            let mut out = alloc::vec![0.0f32; x.shape().volume()];
            let mut buf = alloc::vec![0.0f32; c];
            for b in 0..n {
                let base = b * c * plane;
                for p in 0..plane {
                    for (ch, slot) in buf.iter_mut().enumerate() {
                        *slot = x.data()[base + ch * plane + p];
                    }
                    softmax_in_place(&mut buf);
                    for (ch, v) in buf.iter().enumerate() {
                        out[base + ch * plane + p] = *v;
                    }
                }
            }
            out
        }
        (kind, _) => unreachable!("node kind {} with mismatched parameters", kind.name()),
    };
    TensorF32::from_raw(out_shape, data)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &TensorF32,
    weight: &TensorF32,
    bias: &TensorF32,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_shape: &Shape,
) -> Vec<f32> {
    let (n, cin, h, w) = x.shape().as_nchw().expect("validated");
    let (_, cout, oh, ow) = out_shape.as_nchw().expect("validated");
    let mut out = alloc::vec![0.0f32; out_shape.volume()];
    let wd = weight.data();
    for b in 0..n {
        for oc in 0..cout {
            let dst = &mut out[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            dst.fill(bias.data()[oc]);
            for ic in 0..cin {
                let src = &x.data()[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * cin + ic) * kh + ky) * kw + kx];
                        // valid output columns: 0 <= ox*stride + kx - padding < w
                        let ox_lo = padding.saturating_sub(kx).div_ceil(stride);
                        let ox_hi = ((w + padding).saturating_sub(kx)).div_ceil(stride).min(ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if stride == 1 {
                                // contiguous slices let the loop vectorize
                                let s = &row[ox_lo + kx - padding..ox_hi + kx - padding];
                                for (d, &v) in drow[ox_lo..ox_hi].iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox] += wv * row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_pool(x: &TensorF32, kernel: usize, stride: usize, out_shape: &Shape) -> Vec<f32> {
    let (_, _, h, w) = x.shape().as_nchw().expect("validated");
    let (_, _, oh, ow) = out_shape.as_nchw().expect("validated");
    let mut out = Vec::with_capacity(out_shape.volume());
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}
