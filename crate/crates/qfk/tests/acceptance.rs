//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are never captured; exits 1 on any FAIL.

mod common;

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use qfk::bench::{measure_fps, BenchConfig, BenchTarget};
use qfk::npy;
use qfk_core::compiler::{compile, fold_batchnorm};
use qfk_core::dataset::{make_mask, split_dataset};
use qfk_core::image::RgbImage;
use qfk_core::runtime::int8::interpret_int8;
use qfk_core::runtime::{execute_plan, run_graph_f32, run_plan_int8, Arena, DECISION_THRESHOLD};
use qfk_core::tensor::quantize;
use qfk_core::uynet::{
    bce_class, build_uynet, cross_entropy_seg, final_loss, UYNetConfig, Variant,
};
use qfk_core::{Shape, TensorF32, TensorI8};

use common::{quantized, random_graph, random_inputs, rng};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// 1. compiled plans agree bit-exactly with the node-by-node interpreter
fn compiler_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut max_nodes = 0;
    for seed in 0..100u64 {
        let g = random_graph(seed, 12);
        max_nodes = max_nodes.max(g.nodes.len());
        let (_, qg) = quantized(&g, 4, seed);
        let plan = compile(&qg).unwrap();
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..=8);
        let inputs: Vec<TensorI8> = (0..n)
            .map(|_| {
                let data = (0..g.input_shape.volume())
                    .map(|_| r.random::<i8>())
                    .collect();
                TensorI8::new(g.input_shape.clone(), data, plan.input_qparams).unwrap()
            })
            .collect();
        let mut arena = Arena::new(&plan);
        let out = execute_plan(&plan, &inputs, &mut arena, &qfk::ParallelExecutor).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let reference = interpret_int8(&qg, x).unwrap();
            let mask = reference[&qg.outputs.mask].data();
            let ok_mask = out.mask.data()[i * mask.len()..(i + 1) * mask.len()] == *mask;
            let ok_class = match (qg.outputs.class, &out.class) {
                (Some(c), Some(t)) => t.data()[i] == reference[&c].data()[0],
                (None, None) => true,
                _ => false,
            };
            if !(ok_mask && ok_class) {
                mismatches.push(seed);
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && max_nodes <= 12 && secs < 60.0,
        format!(
            "100 graphs (max {max_nodes} nodes), mismatching seeds {mismatches:?}, {secs:.1} s (limit 60 s)"
        ),
    )
}

fn fidelity_cfg() -> UYNetConfig {
    UYNetConfig {
        input_size: (64, 64),
        encoder_depth: 2,
        ..UYNetConfig::default()
    }
}

// 2. INT8 decisions track FP32 decisions
fn quantization_fidelity() -> Outcome {
    let start = Instant::now();
    let g = build_uynet(&fidelity_cfg(), 2024).unwrap();
    let (_, qg) = quantized(&g, 128, 1);
    let plan = compile(&qg).unwrap();
    let tests = random_inputs(&g, 200, 2);
    let mut agree = 0;
    let mut abs_diff = 0.0f64;
    for chunk in tests.chunks(8) {
        let fp = run_graph_f32(&g, &TensorF32::concat_batch(chunk).unwrap()).unwrap();
        let qs: Vec<TensorI8> = chunk
            .iter()
            .map(|x| quantize(x, plan.input_qparams).unwrap())
            .collect();
        let int8 = run_plan_int8(&plan, &qs).unwrap();
        for (f, q) in fp.scores.unwrap().iter().zip(&int8) {
            agree += usize::from((*f >= DECISION_THRESHOLD) == (q.label == 1));
            abs_diff += (f - q.score).abs() as f64;
        }
    }
    let rate = agree as f64 / tests.len() as f64;
    let mean = abs_diff / tests.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rate >= 0.95 && mean <= 0.05 && secs < 120.0,
        format!("agreement {rate:.3} (>= 0.95), mean |dscore| {mean:.4} (<= 0.05), {secs:.1} s (limit 120 s)"),
    )
}

// 3. INT8 throughput against the FP32 reference, and the layer-count ratio
fn throughput() -> Outcome {
    let g = fold_batchnorm(&build_uynet(&fidelity_cfg(), 7).unwrap()).unwrap();
    let (_, qg) = quantized(&g, 16, 3);
    let plan = compile(&qg).unwrap();
    let cfg = BenchConfig {
        images: 80,
        batch: 8,
        warmup: 3,
        ..BenchConfig::default()
    };
    let fp32 = measure_fps(BenchTarget::Fp32(&g), &cfg).unwrap();
    let serial = measure_fps(
        BenchTarget::Int8 {
            plan: &plan,
            parallel: false,
        },
        &cfg,
    )
    .unwrap();
    let parallel = measure_fps(
        BenchTarget::Int8 {
            plan: &plan,
            parallel: true,
        },
        &cfg,
    )
    .unwrap();
    let ratio = parallel.fps / fp32.fps;
    let serial_ratio = serial.fps / fp32.fps;

    let seg_cfg = UYNetConfig {
        variant: Variant::SegOnly,
        ..fidelity_cfg()
    };
    let seg = build_uynet(&seg_cfg, 7).unwrap();
    let (_, seg_q) = quantized(&seg, 4, 3);
    let seg_plan = compile(&seg_q).unwrap();
    let layers = plan.instructions.len() as f64 / seg_plan.instructions.len() as f64;
    outcome(
        ratio >= 1.5 && (1.6..=2.4).contains(&layers),
        format!(
            "int8 {:.1} fps vs fp32 {:.1} fps: {ratio:.2}x (>= 1.5; serial int8 {serial_ratio:.2}x); \
             instructions full/seg-only {}/{} = {layers:.3} (in [1.6, 2.4])",
            parallel.fps,
            fp32.fps,
            plan.instructions.len(),
            seg_plan.instructions.len()
        ),
    )
}

// 4. loss closed forms
fn loss_closed_forms() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let probs = TensorF32::new(Shape::nchw(1, 2, 4, 4).unwrap(), vec![0.5; 32]).unwrap();
    let mut r = rng(4);
    let target =
        qfk_core::image::BinaryMask::new(4, 4, (0..16).map(|_| r.random_range(0..2)).collect())
            .unwrap();
    let ce = cross_entropy_seg(&probs, &[target]).unwrap();
    let bce = bce_class(0.5, 1);
    let mut exact = true;
    for _ in 0..100 {
        let (a, b) = (r.random_range(0.0..10.0), r.random_range(0.0..10.0));
        exact &= final_loss(a, b).unwrap().l_final == (a + b) / 2.0;
    }
    outcome(
        (ce - ln2).abs() <= 1e-6 && (bce - ln2).abs() <= 1e-6 && exact,
        format!("CE(uniform) {ce:.9}, BCE(0.5, 1) {bce:.9}, ln 2 = {ln2:.9}, final = (a+b)/2 exact: {exact}"),
    )
}

// 5. mask generation against a per-pixel oracle
fn mask_oracle() -> Outcome {
    let mut r = rng(5);
    let mut bad = 0;
    for _ in 0..50 {
        let (w, h) = (r.random_range(1..40), r.random_range(1..40));
        let real: Vec<u8> = (0..w * h * 3).map(|_| r.random()).collect();
        let fake: Vec<u8> = real
            .iter()
            .map(|&v| if r.random_bool(0.3) { r.random() } else { v })
            .collect();
        let threshold: u8 = r.random();
        let mask = make_mask(
            &RgbImage::new(w, h, real.clone()).unwrap(),
            &RgbImage::new(w, h, fake.clone()).unwrap(),
            threshold,
        )
        .unwrap();
        let oracle: Vec<u8> = (0..w * h)
            .map(|p| {
                let d = (0..3)
                    .map(|c| (real[3 * p + c] as i32 - fake[3 * p + c] as i32).abs())
                    .max()
                    .unwrap();
                u8::from(d > threshold as i32)
            })
            .collect();
        bad += usize::from(mask.data() != oracle.as_slice());
    }
    let frame = RgbImage::new(8, 8, (0..192).map(|_| r.random()).collect()).unwrap();
    let same = make_mask(&frame, &frame, 0).unwrap().count_ones() == 0;
    outcome(
        bad == 0 && same,
        format!("{bad}/50 pairs differ from oracle; identical frames all-zero: {same}"),
    )
}

// 6. no cluster straddles splits; proportions within one largest cluster
fn leakage_freedom() -> Outcome {
    let mut r = rng(6);
    let mut straddles = 0;
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for seed in 0..1000u64 {
        let n_clusters = r.random_range(3..40);
        let mut clusters = BTreeMap::new();
        let mut largest = 124;
        for f in 0..124 {
            clusters.insert(format!("big_{f:03}"), 0usize);
        }
        for c in 1..n_clusters {
            let size = r.random_range(1..30);
            largest = largest.max(size);
            for f in 0..size {
                clusters.insert(format!("c{c}_{f}"), c);
            }
        }
        let mut ratios = [
            r.random_range(0.05..1.0),
            r.random_range(0.05..1.0),
            r.random_range(0.05..1.0),
        ];
        let sum: f64 = ratios.iter().sum();
        ratios.iter_mut().for_each(|x| *x /= sum);
        ratios[2] = 1.0 - ratios[0] - ratios[1];
        let m = split_dataset(&clusters, ratios, seed).unwrap();
        straddles += m.cluster_splits().values().filter(|s| s.len() != 1).count();
        let total = clusters.len() as f64;
        for (i, &got) in m.split_sizes().iter().enumerate() {
            let dev = (got as f64 - ratios[i] * total).abs();
            worst = worst.max(dev / largest as f64);
            bound_ok &= dev <= largest as f64;
        }
    }
    outcome(
        straddles == 0 && bound_ok,
        format!("1000 manifests: {straddles} straddling clusters; worst deviation {worst:.3} x largest cluster (<= 1)"),
    )
}

// 7. NPY layout
fn npy_layout() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.npy");
    let mut r = rng(7);
    let mask = common::uniform(&mut r, Shape::new(vec![2, 224, 224]).unwrap(), 0.0, 1.0);
    npy::save_mask_npy(&mask, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let magic = bytes[..8] == [0x93, 0x4E, 0x55, 0x4D, 0x50, 0x59, 0x01, 0x00];
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data = bytes.len() - 10 - hlen;
    let round_trip = npy::load_mask_npy(&path).unwrap() == mask;
    outcome(
        magic && data == 401_408 && round_trip && (10 + hlen).is_multiple_of(64),
        format!(
            "magic ok: {magic}, data section {data} bytes (401408), round trip exact: {round_trip}"
        ),
    )
}

// 8. softmax normalization and batch-norm folding
fn normalization_and_folding() -> Outcome {
    let cfg = UYNetConfig {
        input_size: (32, 32),
        encoder_depth: 2,
        base_channels: 8,
        ..UYNetConfig::default()
    };
    let g = build_uynet(&cfg, 8).unwrap();
    let mut worst_sum = 0.0f32;
    for x in random_inputs(&g, 20, 8) {
        let m = run_graph_f32(&g, &x).unwrap().mask;
        let (p0, p1) = m.data().split_at(32 * 32);
        for (a, b) in p0.iter().zip(p1) {
            worst_sum = worst_sum.max((a + b - 1.0).abs());
        }
    }
    let mut worst_fold = 0.0f32;
    for seed in 0..20u64 {
        let g = if seed % 2 == 0 {
            random_graph(500 + seed, 12)
        } else {
            let cfg = UYNetConfig {
                base_channels: 4,
                ..cfg
            };
            build_uynet(&cfg, seed).unwrap()
        };
        let folded = fold_batchnorm(&g).unwrap();
        for x in random_inputs(&g, 2, seed) {
            let a = run_graph_f32(&g, &x).unwrap();
            let b = run_graph_f32(&folded, &x).unwrap();
            let diff = |p: &[f32], q: &[f32]| {
                p.iter()
                    .zip(q)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0f32, f32::max)
            };
            worst_fold = worst_fold.max(diff(a.mask.data(), b.mask.data()));
            if let (Some(s), Some(t)) = (&a.scores, &b.scores) {
                worst_fold = worst_fold.max(diff(s, t));
            }
        }
    }
    outcome(
        worst_sum <= 1e-6 && worst_fold <= 1e-4,
        format!("max |sum - 1| {worst_sum:.2e} (<= 1e-6); max BN-fold change {worst_fold:.2e} (<= 1e-4)"),
    )
}

/// Runs the binary inside `dir`, writing outputs there.
fn qfk(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qfk"))
        .current_dir(dir)
        .args(["--output-dir", "."])
        .args(args)
        .output()
        .unwrap()
}

// 9. byte-reproducible build, quantize and compile
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    common::write_png_images(&images, 12, 40, 40, 9);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        std::fs::create_dir_all(&out).unwrap();
        // relative paths keep run.json comparable across directories
        let steps: [&[&str]; 4] = [
            &[
                "--seed",
                "7",
                "build",
                "--height",
                "32",
                "--width",
                "32",
                "--depth",
                "2",
                "--base-channels",
                "4",
            ],
            &[
                "calibrate",
                "--model",
                "model.qfk",
                "--images",
                "../images",
                "--force",
            ],
            &[
                "quantize",
                "--model",
                "model.qfk",
                "--calibration",
                "calibration.json",
            ],
            &["compile", "--model", "model.int8.qfk"],
        ];
        for step in steps {
            let res = qfk(&out, step);
            if !res.status.success() {
                return outcome(
                    false,
                    format!("{step:?} failed: {}", String::from_utf8_lossy(&res.stderr)),
                );
            }
        }
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        files.push(
            [
                "model.qfk",
                "calibration.json",
                "model.int8.qfk",
                "plan.json",
                "run.json",
            ]
            .map(read),
        );
    }
    let names = [
        "model.qfk",
        "calibration.json",
        "model.int8.qfk",
        "plan.json",
        "run.json",
    ];
    let differing: Vec<&str> = names
        .iter()
        .zip(files[0].iter().zip(&files[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    outcome(
        differing.is_empty(),
        format!("two runs of build/calibrate/quantize/compile; differing files: {differing:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("compiler oracle equivalence", compiler_oracle),
        ("quantization fidelity", quantization_fidelity),
        ("throughput and instruction ratio", throughput),
        ("loss closed forms", loss_closed_forms),
        ("mask oracle", mask_oracle),
        ("leakage freedom", leakage_freedom),
        ("NPY bit exactness", npy_layout),
        (
            "softmax normalization and BN folding",
            normalization_and_folding,
        ),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {}. {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
