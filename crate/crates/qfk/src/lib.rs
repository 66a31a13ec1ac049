//! Std companion to `qfk-core`: the `.qfk` model container, NPY masks, image
//! and JSON IO, a thread-pool plan executor, the throughput harness and the
//! `qfk` command line.

pub mod bench;
pub mod calibrate;
pub mod cli;
pub mod container;
pub mod exec;
pub mod io;
pub mod npy;

pub use exec::ParallelExecutor;
