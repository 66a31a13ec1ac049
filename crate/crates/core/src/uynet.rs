//! U-YNet: a UNet encoder/decoder producing a two-class per-pixel mask, plus
//! a classification branch fed by the same bottleneck features.
//!
//! ```text
//! input ─ enc0 ─ pool ─ enc1 ─ pool ─ ... ─ bottleneck ─┬─ up/cat(enc_k) ... ─ 1x1 conv ─ softmax   (mask)
//!           └──────────── skip connections ─────────────┘
//!                                                       └─ conv stack ─ GAP ─ dense ─ sigmoid      (class)
//! ```
//!
//! The classification branch carries as many 3x3 conv layers as the
//! segmentation path (encoder, bottleneck, decoder and head), so attaching it
//! roughly doubles the network's layer count and compute.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphBuilder, NodeId, NodeKind, Outputs, Params};
use crate::image::BinaryMask;
use crate::tensor::{Shape, TensorF32};
use crate::{Error, Result};

/// Number of mask classes (real, fake).
pub const SEG_CLASSES: usize = 2;
const INPUT_CHANNELS: usize = 3;
const BN_EPS: f32 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Variant {
    /// Mask and class outputs.
    Full,
    /// Encoder and decoder only.
    SegOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UYNetConfig {
    /// (H, W)
    pub input_size: (usize, usize),
    pub encoder_depth: usize,
    pub base_channels: usize,
    /// 3x3 conv layers in the classification branch; `None` mirrors the
    /// segmentation path's conv count.
    pub class_conv_layers: Option<usize>,
    pub variant: Variant,
}

impl Default for UYNetConfig {
    fn default() -> Self {
        Self {
            input_size: (224, 224),
            encoder_depth: 4,
            base_channels: 16,
            class_conv_layers: None,
            variant: Variant::Full,
        }
    }
}

impl UYNetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.encoder_depth < 2 {
            return Err(Error::InvalidConfig("encoder_depth must be >= 2".into()));
        }
        if self.encoder_depth > 10 {
            return Err(Error::InvalidConfig("encoder_depth must be <= 10".into()));
        }
        let div = 1usize << self.encoder_depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "input {h}x{w} not divisible by 2^{}",
                self.encoder_depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// 3x3/1x1 conv layers on the input-to-mask path.
    pub fn seg_conv_layers(&self) -> usize {
        // 2 per encoder stage, 2 bottleneck, 3 per decoder stage, 1 head
        5 * self.encoder_depth + 3
    }

    pub fn class_convs(&self) -> usize {
        self.class_conv_layers
            .unwrap_or_else(|| self.seg_conv_layers())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::nchw(1, INPUT_CHANNELS, self.input_size.0, self.input_size.1).expect("validated")
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect()
    }

    fn range(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(lo..=hi)).collect()
    }

    fn tensor(dims: Vec<usize>, data: Vec<f32>) -> TensorF32 {
        TensorF32::new(Shape::new(dims).expect("positive dims"), data).expect("finite init")
    }

    /// He-uniform: bound = sqrt(6 / fan_in).
    fn conv(&mut self, out_c: usize, in_c: usize, k: usize) -> Params {
        let fan_in = in_c * k * k;
        let bound = libm::sqrtf(6.0 / fan_in as f32);
        Params::Conv {
            weight: Self::tensor(
                alloc::vec![out_c, in_c, k, k],
                self.uniform(out_c * fan_in, bound),
            ),
            bias: Self::tensor(alloc::vec![out_c], self.uniform(out_c, 0.05)),
        }
    }

    fn batch_norm(&mut self, c: usize) -> Params {
        Params::BatchNorm {
            gamma: Self::tensor(alloc::vec![c], self.range(c, 0.8, 1.2)),
            beta: Self::tensor(alloc::vec![c], self.range(c, -0.1, 0.1)),
            mean: Self::tensor(alloc::vec![c], self.range(c, -0.1, 0.1)),
            var: Self::tensor(alloc::vec![c], self.range(c, 0.8, 1.2)),
        }
    }

    fn dense(&mut self, out_f: usize, in_f: usize) -> Params {
        let bound = libm::sqrtf(6.0 / in_f as f32);
        Params::Dense {
            weight: Self::tensor(alloc::vec![out_f, in_f], self.uniform(out_f * in_f, bound)),
            bias: Self::tensor(alloc::vec![out_f], alloc::vec![0.0; out_f]),
        }
    }
}

struct Net {
    b: GraphBuilder,
    init: Init,
}

impl Net {
    fn conv(&mut self, x: NodeId, in_c: usize, out_c: usize, k: usize) -> NodeId {
        let params = self.init.conv(out_c, in_c, k);
        self.b.add(
            NodeKind::Conv2d {
                out_channels: out_c,
                kernel: (k, k),
                stride: 1,
                padding: k / 2,
            },
            &[x],
            params,
        )
    }

    fn conv_bn_relu(&mut self, x: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let c = self.conv(x, in_c, out_c, 3);
        let params = self.init.batch_norm(out_c);
        let bn = self
            .b
            .add(NodeKind::BatchNorm { eps: BN_EPS }, &[c], params);
        self.b.add(NodeKind::Relu, &[bn], Params::None)
    }

    fn double_conv(&mut self, x: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let a = self.conv_bn_relu(x, in_c, out_c);
        self.conv_bn_relu(a, out_c, out_c)
    }
}

/// Builds U-YNet with deterministic, seeded weights.
pub fn build_uynet(cfg: &UYNetConfig, seed: u64) -> Result<Graph> {
    cfg.validate()?;
    let mut net = Net {
        b: GraphBuilder::new(),
        init: Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        },
    };
    let ch = |d: usize| cfg.base_channels << d;

    let mut x = net.b.input();
    let mut in_c = INPUT_CHANNELS;
    let mut skips = Vec::with_capacity(cfg.encoder_depth);
    for d in 0..cfg.encoder_depth {
        let f = net.double_conv(x, in_c, ch(d));
        skips.push(f);
        x = net.b.add(
            NodeKind::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            &[f],
            Params::None,
        );
        in_c = ch(d);
    }
    let bottleneck = net.double_conv(x, in_c, ch(cfg.encoder_depth));

    let mut y = bottleneck;
    for d in (0..cfg.encoder_depth).rev() {
        let up = net.b.add(NodeKind::Upsample2xNearest, &[y], Params::None);
        let up = net.conv_bn_relu(up, ch(d + 1), ch(d));
        let cat = net.b.add(NodeKind::Concat, &[up, skips[d]], Params::None);
        y = net.double_conv(cat, 2 * ch(d), ch(d));
    }
    let logits = net.conv(y, ch(0), SEG_CLASSES, 1);
    let mask = net
        .b
        .add(NodeKind::SoftmaxPerPixel, &[logits], Params::None);

    let class = match cfg.variant {
        Variant::SegOnly => None,
        Variant::Full => {
            let width = ch(cfg.encoder_depth);
            let mut c = bottleneck;
            for _ in 0..cfg.class_convs() {
                c = net.conv_bn_relu(c, width, width);
            }
            let gap = net.b.add(NodeKind::GlobalAvgPool, &[c], Params::None);
            let params = net.init.dense(1, width);
            let logit = net
                .b
                .add(NodeKind::Dense { out_features: 1 }, &[gap], params);
            Some(net.b.add(NodeKind::Sigmoid, &[logit], Params::None))
        }
    };
    net.b.finish(cfg.input_shape(), Outputs { mask, class })
}

/// Per-component losses and their average.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_final: f64,
}

/// Mean per-pixel cross-entropy of a (N, 2, H, W) probability map against
/// N binary target masks.
pub fn cross_entropy_seg(mask_probs: &TensorF32, targets: &[BinaryMask]) -> Result<f64> {
    let (n, c, h, w) = mask_probs.shape().as_nchw().ok_or_else(|| {
        Error::InvalidShape(alloc::format!(
            "expected (N,2,H,W), got {}",
            mask_probs.shape()
        ))
    })?;
    if c != SEG_CLASSES || targets.len() != n {
        return Err(Error::InvalidShape(alloc::format!(
            "probabilities {} vs {} targets",
            mask_probs.shape(),
            targets.len()
        )));
    }
    let plane = h * w;
    let p = mask_probs.data();
    let mut total = 0.0f64;
    for (b, t) in targets.iter().enumerate() {
        if (t.width(), t.height()) != (w, h) {
            return Err(Error::InvalidShape(alloc::format!(
                "target {b} is {}x{}, expected {w}x{h}",
                t.width(),
                t.height()
            )));
        }
        let base = b * SEG_CLASSES * plane;
        for (px, &label) in t.data().iter().enumerate() {
            let p0 = p[base + px] as f64;
            let p1 = p[base + plane + px] as f64;
            if (p0 + p1 - 1.0).abs() > 1e-5 || p0 < 0.0 || p1 < 0.0 {
                return Err(Error::InvalidProbabilities(alloc::format!(
                    "pixel {px} of item {b} sums to {}",
                    p0 + p1
                )));
            }
            let pt = if label == 1 { p1 } else { p0 };
            total -= libm::log(pt.max(PROB_FLOOR));
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Binary cross-entropy of one predicted probability against a 0/1 label.
pub fn bce_class(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let y = label as f64;
    -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
}

/// Average of the segmentation and classification losses.
pub fn final_loss(l_seg: f64, l_cls: f64) -> Result<LossReport> {
    if !(l_seg >= 0.0 && l_cls >= 0.0) {
        return Err(Error::NegativeLoss);
    }
    Ok(LossReport {
        l_seg,
        l_cls,
        l_final: (l_seg + l_cls) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, validate};
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use core::f64::consts::LN_2;

    fn small() -> UYNetConfig {
        UYNetConfig {
            input_size: (64, 64),
            encoder_depth: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn default_graph_shapes() {
        let cfg = UYNetConfig::default();
        let g = build_uynet(&cfg, 0).unwrap();
        assert!(validate(&g).is_valid());
        let shapes = infer_shapes(&g, &Shape::nchw(2, 3, 224, 224).unwrap()).unwrap();
        assert_eq!(shapes[&g.outputs.mask].dims(), &[2, 2, 224, 224]);
        assert_eq!(shapes[&g.outputs.class.unwrap()].dims(), &[2, 1]);
    }

    #[test]
    fn depth_two_mask_matches_input() {
        let g = build_uynet(&small(), 1).unwrap();
        let shapes = infer_shapes(&g, &Shape::nchw(3, 3, 64, 64).unwrap()).unwrap();
        assert_eq!(shapes[&g.outputs.mask].dims(), &[3, 2, 64, 64]);
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = build_uynet(&small(), 42).unwrap();
        let b = build_uynet(&small(), 42).unwrap();
        let c = build_uynet(&small(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small();
        cfg.encoder_depth = 1;
        assert!(build_uynet(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.input_size = (62, 64);
        assert!(build_uynet(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.base_channels = 0;
        assert!(build_uynet(&cfg, 0).is_err());
    }

    fn path_counts(g: &Graph) -> BTreeMap<NodeId, u64> {
        let mut paths = BTreeMap::new();
        for n in &g.nodes {
            let p = if n.id == g.input {
                1
            } else {
                n.inputs.iter().map(|i| paths[i]).sum()
            };
            paths.insert(n.id, p);
        }
        paths
    }

    #[test]
    fn class_branch_is_a_single_path_avoiding_the_decoder() {
        for depth in 2..=4 {
            let cfg = UYNetConfig {
                input_size: (64, 64),
                encoder_depth: depth,
                base_channels: 2,
                ..Default::default()
            };
            let g = build_uynet(&cfg, 3).unwrap();
            let class = g.outputs.class.unwrap();
            assert_eq!(path_counts(&g)[&class], 1);

            // ancestors of the class output contain no upsample/concat
            let mut anc = BTreeMap::new();
            anc.insert(class, ());
            for n in g.nodes.iter().rev() {
                if anc.contains_key(&n.id) {
                    for i in &n.inputs {
                        anc.insert(*i, ());
                    }
                }
            }
            for n in &g.nodes {
                if anc.contains_key(&n.id) {
                    assert!(!matches!(
                        n.kind,
                        NodeKind::Upsample2xNearest | NodeKind::Concat
                    ));
                }
            }
        }
    }

    #[test]
    fn seg_only_has_no_class_output() {
        let mut cfg = small();
        cfg.variant = Variant::SegOnly;
        let g = build_uynet(&cfg, 0).unwrap();
        assert!(g.outputs.class.is_none());
        assert!(!g.nodes.iter().any(|n| n.kind == NodeKind::Sigmoid));
    }

    #[test]
    fn conv_layer_counts() {
        let cfg = small();
        let g = build_uynet(&cfg, 0).unwrap();
        let convs = g
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Conv2d { .. }))
            .count();
        assert_eq!(convs, 2 * cfg.seg_conv_layers());
    }

    fn probs(n: usize, h: usize, w: usize, p1: f32) -> TensorF32 {
        let plane = h * w;
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend(core::iter::repeat_n(1.0 - p1, plane));
            data.extend(core::iter::repeat_n(p1, plane));
        }
        TensorF32::new(Shape::nchw(n, 2, h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let t = BinaryMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let l = cross_entropy_seg(&probs(1, 2, 2, 0.5), core::slice::from_ref(&t)).unwrap();
        assert!((l - LN_2).abs() < 1e-6);

        let ones = BinaryMask::new(2, 2, vec![1; 4]).unwrap();
        assert!(
            cross_entropy_seg(&probs(1, 2, 2, 1.0), core::slice::from_ref(&ones))
                .unwrap()
                .abs()
                < 1e-9
        );
        let l = cross_entropy_seg(&probs(1, 2, 2, 0.25), &[ones]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-6);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_shape_errors() {
        let t = BinaryMask::new(3, 2, vec![0; 6]).unwrap();
        assert!(cross_entropy_seg(&probs(1, 2, 2, 0.5), &[t]).is_err());
        assert!(cross_entropy_seg(&probs(2, 2, 2, 0.5), &[BinaryMask::zeros(2, 2)]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_class(0.5, 1) - LN_2).abs() < 1e-6);
        assert!(bce_class(1.0, 1) <= 1e-12 + f64::EPSILON);
        assert!((bce_class(0.1, 0) - 0.105361).abs() < 1e-6);
        assert!((bce_class(0.1, 0) + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn final_loss_is_the_mean() {
        assert_eq!(final_loss(2.0, 4.0).unwrap().l_final, 3.0);
        assert_eq!(final_loss(0.0, 0.0).unwrap().l_final, 0.0);
        assert_eq!(final_loss(LN_2, LN_2).unwrap().l_final, LN_2);
        assert_eq!(final_loss(-1.0, 0.0), Err(Error::NegativeLoss));
    }
}
