//! Plan executor: im2col convolutions with 16-bit dot products into 32-bit
//! accumulators, operating on a preallocated buffer arena.
//!
//! Buffers hold `MAX_BATCH` images back to back. Instructions of one stage
//! write pairwise distinct buffers and only read buffers written in earlier
//! stages, so a stage may run its instructions in any order or concurrently.

use alloc::vec::Vec;

use crate::compiler::{Instruction, OpCode, Plan, MAX_BATCH};
use crate::quantizer::Fusion;
use crate::runtime::int8::{finish_acc, rescale, softmax_pixel};

/// One buffer per plan slot, each sized for a full batch.
#[derive(Debug, Clone)]
pub struct Arena {
    pub buffers: Vec<Vec<i8>>,
}

impl Arena {
    pub fn new(plan: &Plan) -> Self {
        Self {
            buffers: plan
                .buffers
                .iter()
                .map(|b| alloc::vec![0i8; b.bytes])
                .collect(),
        }
    }
}

/// Per-worker temporary storage.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    col: Vec<i16>,
    probs: Vec<f32>,
}

/// Strategy for running the instructions of one stage.
pub trait StageExecutor {
    fn run_stage(&self, plan: &Plan, stage: &[Instruction], arena: &mut Arena, batch: usize);
}

/// Runs instructions one after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct SerialExecutor;

impl StageExecutor for SerialExecutor {
    fn run_stage(&self, plan: &Plan, stage: &[Instruction], arena: &mut Arena, batch: usize) {
        let mut scratch = Scratch::default();
        for ins in stage {
            let mut out = core::mem::take(&mut arena.buffers[ins.output]);
            {
                let inputs: Vec<&[i8]> = ins
                    .inputs
                    .iter()
                    .map(|&b| arena.buffers[b].as_slice())
                    .collect();
                execute_instruction(plan, ins, &inputs, &mut out, batch, &mut scratch);
            }
            arena.buffers[ins.output] = out;
        }
    }
}

fn volume(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

#[inline]
fn dot(a: &[i16], b: &[i16]) -> i32 {
    // products stay below 2^15 (|w| <= 127, |q - zp| <= 255), so sums of
    // fewer than 2^16 terms are exact; wrapping adds vectorize even with
    // overflow checks enabled
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32))
}

/// Executes one instruction for the first `batch` images. `inputs` are the
/// instruction's input buffers in order; `out` is its output buffer.
pub fn execute_instruction(
    plan: &Plan,
    ins: &Instruction,
    inputs: &[&[i8]],
    out: &mut [i8],
    batch: usize,
    scratch: &mut Scratch,
) {
    debug_assert!(batch <= MAX_BATCH);
    let out_qp = ins.out_qparams;
    let in_qp = ins.in_qparams[0];
    let in_vol = volume(ins.in_dims[0]);
    let out_vol = volume(ins.out_dims);
    let params = ins.params.map(|i| &plan.params[i]);
    match ins.op {
        OpCode::Conv {
            kernel: (kh, kw),
            stride,
            padding,
            relu,
        } => {
            let p = params.expect("conv carries parameters");
            let [cin, h, w] = ins.in_dims[0];
            let [cout, oh, ow] = ins.out_dims;
            let k = cin * kh * kw;
            let fusion = if relu { Fusion::Relu } else { Fusion::None };
            let zp = in_qp.zero_point as i16;
            let r = &ins.requant[0];
            let col = &mut scratch.col;
            col.clear();
            col.resize(oh * ow * k, 0);
            for b in 0..batch {
                let x = &inputs[0][b * in_vol..(b + 1) * in_vol];
                // rows are output pixels, columns (ic, ky, kx); padding stays 0
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = &mut col[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                        let mut j = 0;
                        for ic in 0..cin {
                            let plane = &x[ic * h * w..(ic + 1) * h * w];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    row[j] =
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            0
                                        } else {
                                            plane[iy as usize * w + ix as usize] as i16 - zp
                                        };
                                    j += 1;
                                }
                            }
                        }
                    }
                }
                let dst = &mut out[b * out_vol..(b + 1) * out_vol];
                let npix = oh * ow;
                for (pix, patch) in col.chunks_exact(k).enumerate() {
                    for oc in 0..cout {
                        let acc = dot(&p.weights[oc * k..(oc + 1) * k], patch);
                        dst[oc * npix + pix] =
                            finish_acc(p.bias[oc].saturating_add(acc), r, out_qp, fusion, None);
                    }
                }
            }
        }
        OpCode::Dense { sigmoid } => {
            let p = params.expect("dense carries parameters");
            let fout = ins.out_dims[0];
            let fusion = if sigmoid {
                Fusion::Sigmoid {
                    pre: ins
                        .pre_activation
                        .expect("fused dense records its pre-activation parameters"),
                }
            } else {
                Fusion::None
            };
            let zp = in_qp.zero_point as i16;
            let col = &mut scratch.col;
            for b in 0..batch {
                col.clear();
                col.extend(
                    inputs[0][b * in_vol..(b + 1) * in_vol]
                        .iter()
                        .map(|&q| q as i16 - zp),
                );
                for o in 0..fout {
                    let acc = dot(&p.weights[o * in_vol..(o + 1) * in_vol], col);
                    out[b * fout + o] = finish_acc(
                        p.bias[o].saturating_add(acc),
                        &ins.requant[0],
                        out_qp,
                        fusion,
                        p.lut.as_deref(),
                    );
                }
            }
        }
        OpCode::MaxPool { kernel, stride } => {
            let [_, h, w] = ins.in_dims[0];
            let [c, oh, ow] = ins.out_dims;
            let r = &ins.requant[0];
            for b in 0..batch {
                for ch in 0..c {
                    let plane = &inputs[0][b * in_vol + ch * h * w..b * in_vol + (ch + 1) * h * w];
                    let dst =
                        &mut out[b * out_vol + ch * oh * ow..b * out_vol + (ch + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = i8::MIN;
                            for ky in 0..kernel {
                                let row = &plane[(oy * stride + ky) * w + ox * stride..];
                                for &v in &row[..kernel] {
                                    m = m.max(v);
                                }
                            }
                            dst[oy * ow + ox] = rescale(m, in_qp, out_qp, r);
                        }
                    }
                }
            }
        }
        OpCode::Upsample => {
            let [c, h, w] = ins.in_dims[0];
            let r = &ins.requant[0];
            for b in 0..batch {
                for ch in 0..c {
                    let plane = &inputs[0][b * in_vol + ch * h * w..b * in_vol + (ch + 1) * h * w];
                    let dst =
                        &mut out[b * out_vol + ch * 4 * h * w..b * out_vol + (ch + 1) * 4 * h * w];
                    for (y, drow) in dst.chunks_exact_mut(2 * w).enumerate() {
                        let srow = &plane[(y / 2) * w..(y / 2 + 1) * w];
                        for (pair, &v) in drow.chunks_exact_mut(2).zip(srow) {
                            let q = rescale(v, in_qp, out_qp, r);
                            pair[0] = q;
                            pair[1] = q;
                        }
                    }
                }
            }
        }
        OpCode::Concat => {
            for b in 0..batch {
                let mut off = b * out_vol;
                for (i, src) in inputs.iter().enumerate() {
                    let v = volume(ins.in_dims[i]);
                    let from = ins.in_qparams[i];
                    let r = &ins.requant[i];
                    let dst = &mut out[off..off + v];
                    let s = &src[b * v..(b + 1) * v];
                    if from == out_qp {
                        dst.copy_from_slice(s);
                    } else {
                        for (d, &q) in dst.iter_mut().zip(s) {
                            *d = rescale(q, from, out_qp, r);
                        }
                    }
                    off += v;
                }
            }
        }
        OpCode::GlobalAvgPool => {
            let [_, h, w] = ins.in_dims[0];
            let r = &ins.requant[0];
            let src = &inputs[0][..batch * in_vol];
            for (d, plane) in out.iter_mut().zip(src.chunks_exact(h * w)) {
                let acc: i32 = plane.iter().map(|&q| q as i32 - in_qp.zero_point).sum();
                *d = r.fixed.requantize(acc, out_qp.zero_point);
            }
        }
        OpCode::Relu => {
            let r = &ins.requant[0];
            let zp = out_qp.zero_point as i8;
            for (d, &q) in out[..batch * out_vol]
                .iter_mut()
                .zip(&inputs[0][..batch * in_vol])
            {
                *d = rescale(q, in_qp, out_qp, r).max(zp);
            }
        }
        OpCode::Sigmoid => {
            let lut = params
                .and_then(|p| p.lut.as_deref())
                .expect("sigmoid carries a table");
            for (d, &q) in out[..batch * out_vol]
                .iter_mut()
                .zip(&inputs[0][..batch * in_vol])
            {
                *d = lut[(q as i32 + 128) as usize];
            }
        }
        OpCode::Softmax => {
            let [c, h, w] = ins.in_dims[0];
            out[..batch * out_vol].copy_from_slice(&inputs[0][..batch * in_vol]);
            scratch.probs.clear();
            scratch.probs.resize(c, 0.0);
            for b in 0..batch {
                for p in 0..h * w {
                    softmax_pixel(
                        out,
                        b * out_vol + p,
                        h * w,
                        &mut scratch.probs,
                        in_qp,
                        out_qp,
                    );
                }
            }
        }
    }
}

/// Runs every stage of `plan` on the first `batch` images already placed in
/// the input buffer.
pub fn run_stages<E: StageExecutor + ?Sized>(
    plan: &Plan,
    arena: &mut Arena,
    batch: usize,
    exec: &E,
) {
    for stage in plan.stage_groups() {
        exec.run_stage(plan, stage, arena, batch);
    }
}
