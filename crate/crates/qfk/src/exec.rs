//! Thread-pool stage executor.

use rayon::prelude::*;

use qfk_core::compiler::{Instruction, Plan};
use qfk_core::runtime::exec::{execute_instruction, Scratch};
use qfk_core::runtime::{Arena, StageExecutor};

/// Runs the instructions of a stage concurrently on the rayon pool.
///
/// Output buffers of a stage are pairwise distinct and never read within the
/// same stage, so they are moved out of the arena, filled in parallel against
/// shared reads of the remaining buffers, and moved back.
#[derive(Debug, Default, Clone, Copy)]
pub struct ParallelExecutor;

impl StageExecutor for ParallelExecutor {
    fn run_stage(&self, plan: &Plan, stage: &[Instruction], arena: &mut Arena, batch: usize) {
        if stage.len() == 1 {
            return qfk_core::runtime::SerialExecutor.run_stage(plan, stage, arena, batch);
        }
        let mut outs: Vec<Vec<i8>> = stage
            .iter()
            .map(|ins| std::mem::take(&mut arena.buffers[ins.output]))
            .collect();
        let shared = &*arena;
        stage.par_iter().zip(outs.par_iter_mut()).for_each_init(
            Scratch::default,
            |scratch, (ins, out)| {
                let inputs: Vec<&[i8]> = ins
                    .inputs
                    .iter()
                    .map(|&b| shared.buffers[b].as_slice())
                    .collect();
                execute_instruction(plan, ins, &inputs, out, batch, scratch);
            },
        );
        for (ins, out) in stage.iter().zip(outs) {
            arena.buffers[ins.output] = out;
        }
    }
}
