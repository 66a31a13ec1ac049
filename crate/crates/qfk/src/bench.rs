//! Throughput harness: runs synthetic batches through an FP32 graph or an
//! INT8 plan and records per-batch wall-clock times.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfk_core::bench::{check_request, BenchReport, Precision};
use qfk_core::compiler::{Plan, MAX_BATCH};
use qfk_core::graph::Graph;
use qfk_core::runtime::{
    execute_plan, mask_probabilities, run_graph_f32, to_results, Arena, SerialExecutor,
};
use qfk_core::tensor::quantize;
use qfk_core::uynet::Variant;
use qfk_core::{Error, Result, Shape, TensorF32, TensorI8};

use crate::exec::ParallelExecutor;

/// Distinct synthetic batches; timed batches cycle through them.
const INPUT_POOL: usize = 4;

#[derive(Debug, Clone, Copy)]
pub enum BenchTarget<'a> {
    Fp32(&'a Graph),
    Int8 { plan: &'a Plan, parallel: bool },
}

impl BenchTarget<'_> {
    fn precision(&self) -> Precision {
        match self {
            BenchTarget::Fp32(_) => Precision::Fp32,
            BenchTarget::Int8 { .. } => Precision::Int8,
        }
    }

    fn variant(&self) -> Variant {
        let full = match self {
            BenchTarget::Fp32(g) => g.outputs.class.is_some(),
            BenchTarget::Int8 { plan, .. } => plan.class_output.is_some(),
        };
        if full {
            Variant::Full
        } else {
            Variant::SegOnly
        }
    }

    /// Single-image input shape (1, C, H, W).
    fn input_shape(&self) -> Result<Shape> {
        match self {
            BenchTarget::Fp32(g) => g.input_shape.with_batch(1),
            BenchTarget::Int8 { plan, .. } => {
                let [c, h, w] = plan.input_dims;
                Shape::nchw(1, c, h, w)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub node_name: String,
    /// Timed images; warmup batches come on top.
    pub images: usize,
    pub batch: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            node_name: "local".into(),
            images: 80,
            batch: qfk_core::bench::DEFAULT_BATCH,
            warmup: qfk_core::bench::DEFAULT_WARMUP,
            seed: 0,
        }
    }
}

fn synthetic_images(shape: &Shape, n: usize, rng: &mut ChaCha8Rng) -> Vec<TensorF32> {
    (0..n)
        .map(|_| {
            let data = (0..shape.volume()).map(|_| rng.random::<f32>()).collect();
            TensorF32::new(shape.clone(), data).expect("finite data")
        })
        .collect()
}

/// Runs one batch end to end, from FP32 pixels to per-image probabilities.
/// Returns a value derived from the outputs so the work cannot be elided.
fn run_batch(target: &BenchTarget, images: &[TensorF32], arena: &mut Option<Arena>) -> Result<f32> {
    match *target {
        BenchTarget::Fp32(g) => {
            let out = run_graph_f32(g, &TensorF32::concat_batch(images)?)?;
            Ok(out.mask.data()[0] + out.scores.map_or(0.0, |s| s[0]))
        }
        BenchTarget::Int8 { plan, parallel } => {
            let qs: Vec<TensorI8> = images
                .iter()
                .map(|x| quantize(x, plan.input_qparams))
                .collect::<Result<_>>()?;
            let arena = arena.get_or_insert_with(|| Arena::new(plan));
            let out = if parallel {
                execute_plan(plan, &qs, arena, &ParallelExecutor)?
            } else {
                execute_plan(plan, &qs, arena, &SerialExecutor)?
            };
            if out.class.is_some() {
                Ok(to_results(&out)?.iter().map(|r| r.score).sum())
            } else {
                Ok((0..qs.len())
                    .map(|i| mask_probabilities(&out.mask, i).data()[0])
                    .sum())
            }
        }
    }
}

/// Measures steady-state throughput. Warmup batches run first and are not
/// timed; `fps` is timed images over the summed batch times.
pub fn measure_fps(target: BenchTarget, cfg: &BenchConfig) -> Result<BenchReport> {
    check_request(cfg.images, cfg.batch, cfg.warmup)?;
    if matches!(target, BenchTarget::Int8 { .. }) && cfg.batch > MAX_BATCH {
        return Err(Error::BatchSize {
            got: cfg.batch,
            max: MAX_BATCH,
        });
    }
    let shape = target.input_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<Vec<TensorF32>> = (0..INPUT_POOL)
        .map(|_| synthetic_images(&shape, cfg.batch, &mut rng))
        .collect();
    let mut arena = None;
    let mut sink = 0.0f32;
    for i in 0..cfg.warmup {
        sink += run_batch(&target, &pool[i % INPUT_POOL], &mut arena)?;
    }
    let batches = cfg.images.div_ceil(cfg.batch);
    let mut times = Vec::with_capacity(batches);
    for i in 0..batches {
        let n = (cfg.images - i * cfg.batch).min(cfg.batch);
        let batch = &pool[i % INPUT_POOL][..n];
        let start = Instant::now();
        sink += run_batch(&target, batch, &mut arena)?;
        times.push(start.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    BenchReport::from_timings(
        cfg.node_name.clone(),
        target.variant(),
        target.precision(),
        cfg.batch,
        cfg.images,
        cfg.warmup,
        times,
    )
}
