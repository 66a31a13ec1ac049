//! Shared generators for integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfk_core::compiler::fold_batchnorm;
use qfk_core::graph::{Graph, GraphBuilder, NodeId, NodeKind, Outputs, Params};
use qfk_core::quantizer::{calibrate_and_quantize, QuantizedGraph, Strategy};
use qfk_core::{Shape, TensorF32};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> TensorF32 {
    let data = (0..shape.volume())
        .map(|_| rng.random_range(lo..hi))
        .collect();
    TensorF32::new(shape, data).unwrap()
}

/// `n` single-image inputs with values in [0, 1).
pub fn random_inputs(g: &Graph, n: usize, seed: u64) -> Vec<TensorF32> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| uniform(&mut r, g.input_shape.clone(), 0.0, 1.0))
        .collect()
}

fn conv_params(r: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Params {
    let bound = (6.0 / (inp * k * k) as f32).sqrt();
    Params::Conv {
        weight: uniform(r, Shape::new(vec![out, inp, k, k]).unwrap(), -bound, bound),
        bias: uniform(r, Shape::new(vec![out]).unwrap(), -0.1, 0.1),
    }
}

fn bn_params(r: &mut ChaCha8Rng, c: usize) -> Params {
    let v = |r: &mut ChaCha8Rng, lo, hi| uniform(r, Shape::new(vec![c]).unwrap(), lo, hi);
    Params::BatchNorm {
        gamma: v(r, 0.5, 1.5),
        beta: v(r, -0.2, 0.2),
        mean: v(r, -0.2, 0.2),
        var: v(r, 0.5, 1.5),
    }
}

#[derive(Clone, Copy)]
struct Value {
    id: NodeId,
    c: usize,
    h: usize,
    w: usize,
}

/// A random valid graph of at most `max_nodes` nodes (input included) mixing
/// convolutions, batch norms, activations, pooling, upsampling, concat and
/// the dense classification head.
pub fn random_graph(seed: u64, max_nodes: usize) -> Graph {
    let mut r = rng(seed);
    let mut b = GraphBuilder::new();
    let c0 = r.random_range(1..=3);
    let (h0, w0) = (4 * r.random_range(1..=3), 4 * r.random_range(1..=3));
    let x = b.input();
    let mut pool = vec![Value {
        id: x,
        c: c0,
        h: h0,
        w: w0,
    }];
    let mut nodes = 1;
    let with_class = r.random_bool(0.6);
    // head: optional GAP + dense + sigmoid, plus the mask output itself
    let reserve = if with_class { 3 } else { 0 };
    let budget = max_nodes.saturating_sub(reserve + 1).max(2);

    while nodes < budget {
        let src = pool[r.random_range(0..pool.len())];
        let v = match r.random_range(0..7) {
            0 | 1 => {
                let k = if r.random_bool(0.5) { 3 } else { 1 };
                let stride = if k == 3 && src.h % 2 == 0 && src.w % 2 == 0 && r.random_bool(0.2) {
                    2
                } else {
                    1
                };
                let out = r.random_range(1..=4);
                let id = b.add(
                    NodeKind::Conv2d {
                        out_channels: out,
                        kernel: (k, k),
                        stride,
                        padding: k / 2,
                    },
                    &[src.id],
                    conv_params(&mut r, out, src.c, k),
                );
                nodes += 1;
                let v = Value {
                    id,
                    c: out,
                    h: src.h / stride,
                    w: src.w / stride,
                };
                if nodes < budget && r.random_bool(0.4) {
                    nodes += 1;
                    let bn = b.add(
                        NodeKind::BatchNorm { eps: 1e-5 },
                        &[id],
                        bn_params(&mut r, out),
                    );
                    Value { id: bn, ..v }
                } else {
                    v
                }
            }
            2 => {
                nodes += 1;
                Value {
                    id: b.add(NodeKind::Relu, &[src.id], Params::None),
                    ..src
                }
            }
            3 if src.h % 2 == 0 && src.w % 2 == 0 && src.h > 2 => {
                nodes += 1;
                Value {
                    id: b.add(
                        NodeKind::MaxPool2d {
                            kernel: 2,
                            stride: 2,
                        },
                        &[src.id],
                        Params::None,
                    ),
                    h: src.h / 2,
                    w: src.w / 2,
                    ..src
                }
            }
            4 if src.h <= 8 && src.w <= 8 => {
                nodes += 1;
                Value {
                    id: b.add(NodeKind::Upsample2xNearest, &[src.id], Params::None),
                    h: src.h * 2,
                    w: src.w * 2,
                    ..src
                }
            }
            5 => {
                let partners: Vec<Value> = pool
                    .iter()
                    .copied()
                    .filter(|p| p.id != src.id && p.h == src.h && p.w == src.w)
                    .collect();
                if partners.is_empty() {
                    continue;
                }
                let other = partners[r.random_range(0..partners.len())];
                nodes += 1;
                Value {
                    id: b.add(NodeKind::Concat, &[src.id, other.id], Params::None),
                    c: src.c + other.c,
                    ..src
                }
            }
            6 if src.c >= 2 => {
                nodes += 1;
                Value {
                    id: b.add(NodeKind::SoftmaxPerPixel, &[src.id], Params::None),
                    ..src
                }
            }
            _ => continue,
        };
        pool.push(v);
    }

    // the newest value feeds the mask output; an earlier one the class head
    let last = *pool.last().unwrap();
    let mask = if last.id == x {
        let out = 2;
        b.add(
            NodeKind::Conv2d {
                out_channels: out,
                kernel: (1, 1),
                stride: 1,
                padding: 0,
            },
            &[x],
            conv_params(&mut r, out, c0, 1),
        )
    } else {
        last.id
    };
    let class = with_class.then(|| {
        let src = pool[r.random_range(0..pool.len())];
        let gap = b.add(NodeKind::GlobalAvgPool, &[src.id], Params::None);
        let bound = (6.0 / src.c as f32).sqrt();
        let dense = b.add(
            NodeKind::Dense { out_features: 1 },
            &[gap],
            Params::Dense {
                weight: uniform(&mut r, Shape::new(vec![1, src.c]).unwrap(), -bound, bound),
                bias: uniform(&mut r, Shape::new(vec![1]).unwrap(), -0.1, 0.1),
            },
        );
        b.add(NodeKind::Sigmoid, &[dense], Params::None)
    });
    b.finish(Shape::nchw(1, c0, h0, w0).unwrap(), Outputs { mask, class })
        .unwrap()
}

/// Folds, calibrates on `n` random inputs and quantizes.
pub fn quantized(g: &Graph, n: usize, seed: u64) -> (Graph, QuantizedGraph) {
    let folded = fold_batchnorm(g).unwrap();
    let cal = random_inputs(g, n, seed);
    let qg = calibrate_and_quantize(&folded, &cal, Strategy::MinMax, true).unwrap();
    (folded, qg)
}

/// Writes `n` seeded random RGB PNG files named `img_000.png`, ...
pub fn write_png_images(dir: &Path, n: usize, w: u32, h: u32, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = rng(seed);
    for i in 0..n {
        let data: Vec<u8> = (0..w * h * 3).map(|_| r.random()).collect();
        image::RgbImage::from_raw(w, h, data)
            .unwrap()
            .save(dir.join(format!("img_{i:03}.png")))
            .unwrap();
    }
}
