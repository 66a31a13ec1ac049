//! Execution of graphs and plans, preprocessing and accuracy evaluation.

pub mod exec;
pub mod int8;
pub mod reference;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compiler::{OutputSlot, Plan};
use crate::graph::Graph;
use crate::image::RgbImage;
use crate::tensor::{dequantize, quantize, QuantParams, Shape, TensorF32, TensorI8};
use crate::{Error, Result};

pub use crate::compiler::MAX_BATCH;
pub use exec::{Arena, SerialExecutor, StageExecutor};

/// Scores at or above this value are labelled fake.
pub const DECISION_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// (width, height) of the model input.
    pub target_size: (usize, usize),
    pub value_scale: f32,
    pub input_qparams: QuantParams,
}

impl PreprocessConfig {
    pub fn new(target_size: (usize, usize), input_qparams: QuantParams) -> Self {
        Self {
            target_size,
            value_scale: 1.0 / 255.0,
            input_qparams,
        }
    }
}

/// Resizes to the target size, scales to [0, 1] and quantizes. Both tensors
/// have shape (1, 3, H, W).
pub fn preprocess(image: &RgbImage, cfg: &PreprocessConfig) -> Result<(TensorF32, TensorI8)> {
    let (w, h) = cfg.target_size;
    let data: Vec<f32> = image
        .resize_bilinear_planar(w, h)
        .into_iter()
        .map(|v| v * cfg.value_scale)
        .collect();
    let x = TensorF32::new(Shape::nchw(1, 3, h, w)?, data)?;
    let q = quantize(&x, cfg.input_qparams)?;
    Ok((x, q))
}

/// FP32 outputs for a batch of N images.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Outputs {
    /// (N, 2, H, W) per-pixel class probabilities.
    pub mask: TensorF32,
    /// Per-image fake probability; absent for segmentation-only graphs.
    pub scores: Option<Vec<f32>>,
}

/// Runs the FP32 reference interpreter.
pub fn run_graph_f32(g: &Graph, batch: &TensorF32) -> Result<F32Outputs> {
    let mut outs = reference::forward_f32(g, batch, |_, _| {})?;
    let mask = outs.remove(&g.outputs.mask).expect("mask output");
    let scores = g
        .outputs
        .class
        .map(|id| outs.remove(&id).expect("class output").into_data());
    Ok(F32Outputs { mask, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// (2, H, W); channel 1 is the probability of manipulation.
    pub mask: TensorF32,
    /// 1 (fake) iff `score >= DECISION_THRESHOLD`.
    pub label: u8,
    pub score: f32,
}

impl InferenceResult {
    pub fn from_score(mask: TensorF32, score: f32) -> Self {
        Self {
            mask,
            label: u8::from(score >= DECISION_THRESHOLD),
            score,
        }
    }
}

/// Raw quantized plan outputs, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutputs {
    /// (N, C, H, W).
    pub mask: TensorI8,
    /// (N, 1); absent for segmentation-only plans.
    pub class: Option<TensorI8>,
}

fn check_batch(plan: &Plan, batch: &[TensorI8]) -> Result<()> {
    if batch.is_empty() || batch.len() > MAX_BATCH {
        return Err(Error::BatchSize {
            got: batch.len(),
            max: MAX_BATCH,
        });
    }
    let [c, h, w] = plan.input_dims;
    let expected = Shape::nchw(1, c, h, w)?;
    for t in batch {
        if t.shape() != &expected {
            return Err(Error::InvalidShape(alloc::format!(
                "input image has shape {}, plan expects {}",
                t.shape(),
                expected
            )));
        }
        if t.qparams() != plan.input_qparams {
            return Err(Error::QuantParamsMismatch);
        }
    }
    Ok(())
}

fn read_output(arena: &Arena, slot: OutputSlot, n: usize) -> TensorI8 {
    let [c, h, w] = slot.dims;
    let data = arena.buffers[slot.buffer][..n * c * h * w].to_vec();
    let shape = if slot.rank == 4 {
        Shape::nchw(n, c, h, w)
    } else {
        Shape::new(alloc::vec![n, c * h * w])
    }
    .expect("nonzero dims");
    TensorI8::new(shape, data, slot.qparams).expect("volume matches")
}

/// Executes `plan` on up to [`MAX_BATCH`] images, each of shape (1, C, H, W).
/// Partial batches are padded with zero-point images whose outputs are
/// discarded.
pub fn execute_plan<E: StageExecutor + ?Sized>(
    plan: &Plan,
    batch: &[TensorI8],
    arena: &mut Arena,
    executor: &E,
) -> Result<PlanOutputs> {
    check_batch(plan, batch)?;
    let [c, h, w] = plan.input_dims;
    let vol = c * h * w;
    {
        let input = &mut arena.buffers[plan.input_buffer];
        for (i, t) in batch.iter().enumerate() {
            input[i * vol..(i + 1) * vol].copy_from_slice(t.data());
        }
        input[batch.len() * vol..MAX_BATCH * vol].fill(plan.input_qparams.zero_point as i8);
    }
    exec::run_stages(plan, arena, MAX_BATCH, executor);
    Ok(PlanOutputs {
        mask: read_output(arena, plan.mask_output, batch.len()),
        class: plan
            .class_output
            .map(|o| read_output(arena, o, batch.len())),
    })
}

/// Dequantized mask of image `i`, renormalized so every pixel sums to 1.
pub fn mask_probabilities(mask: &TensorI8, i: usize) -> TensorF32 {
    let (_, c, h, w) = mask.shape().as_nchw().expect("mask is NCHW");
    let plane = h * w;
    let qp = mask.qparams();
    let src = &mask.data()[i * c * plane..(i + 1) * c * plane];
    let mut out: Vec<f32> = src
        .iter()
        .map(|&q| qp.dequantize_value(q).max(0.0))
        .collect();
    for p in 0..plane {
        let sum: f32 = (0..c).map(|ch| out[ch * plane + p]).sum();
        for ch in 0..c {
            let v = &mut out[ch * plane + p];
            *v = if sum > 0.0 { *v / sum } else { 1.0 / c as f32 };
        }
    }
    TensorF32::new(Shape::new(alloc::vec![c, h, w]).expect("nonzero"), out).expect("finite")
}

/// Turns plan outputs into per-image results.
pub fn to_results(out: &PlanOutputs) -> Result<Vec<InferenceResult>> {
    let class = out.class.as_ref().ok_or_else(|| {
        Error::InvalidConfig(String::from(
            "plan has no classification output; labels need the full model",
        ))
    })?;
    let scores = dequantize(class);
    Ok(scores
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            InferenceResult::from_score(mask_probabilities(&out.mask, i), s.clamp(0.0, 1.0))
        })
        .collect())
}

/// Runs a batch of up to eight images through a compiled plan on the
/// calling thread.
pub fn run_plan_int8(plan: &Plan, batch: &[TensorI8]) -> Result<Vec<InferenceResult>> {
    let mut arena = Arena::new(plan);
    to_results(&execute_plan(plan, batch, &mut arena, &SerialExecutor)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn from_counts(total: usize, correct: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::NoResults);
        }
        assert!(correct <= total, "more correct predictions than results");
        Ok(Self {
            total,
            correct,
            wrong: total - correct,
            accuracy: correct as f64 / total as f64,
        })
    }
}

/// Compares predicted labels with ground truth keyed by frame id.
pub fn evaluate(results: &[(String, u8)], labels: &BTreeMap<String, u8>) -> Result<EvalReport> {
    let mut correct = 0;
    for (frame, label) in results {
        let truth = labels.get(frame).ok_or_else(|| Error::MissingLabel {
            frame: frame.clone(),
        })?;
        correct += usize::from(truth == label);
    }
    EvalReport::from_counts(results.len(), correct)
}
