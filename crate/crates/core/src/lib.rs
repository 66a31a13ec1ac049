//! Core of the quantized U-YNet inference toolkit.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (an allocator is required). File formats, timing,
//! thread pools and the command line live in the companion `qfk` crate.
//!
//! The pipeline mirrors a classic INT8 deployment flow:
//!
//! 1. [`uynet::build_uynet`] constructs the multitask graph (UNet encoder and
//!    decoder for per-pixel masks plus a classification branch).
//! 2. [`compiler::fold_batchnorm`] folds batch norms into convolutions.
//! 3. [`quantizer`] calibrates activation ranges and emits a
//!    [`quantizer::QuantizedGraph`].
//! 4. [`compiler::compile`] fuses, schedules into parallel stages and plans
//!    buffer reuse, producing a [`compiler::Plan`].
//! 5. [`runtime`] executes plans in batches of eight.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bench;
pub mod compiler;
pub mod dataset;
mod error;
pub mod graph;
pub mod image;
pub mod quantizer;
pub mod runtime;
pub mod tensor;
pub mod uynet;

pub use error::{Error, Result};
pub use graph::{Graph, Node, NodeId, NodeKind};
pub use tensor::{QuantParams, Shape, TensorF32, TensorI8};
