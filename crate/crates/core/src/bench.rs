//! Throughput reports and comparison tables. Timing itself happens in the
//! caller; this module only does the arithmetic on recorded batch times.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::uynet::Variant;
use crate::{Error, Result};

pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Precision {
    Fp32,
    Int8,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        }
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::SegOnly => "seg-only",
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BenchReport {
    pub node_name: String,
    pub model_variant: Variant,
    pub precision: Precision,
    /// Images in timed batches only.
    pub images: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub warmup_batches: usize,
    /// Seconds per timed batch; `wall_seconds` is their sum.
    pub batch_seconds: Vec<f64>,
    pub batch_size: usize,
}

/// Validates a benchmark request: at least ten full batches and one warmup
/// batch.
pub fn check_request(images: usize, batch: usize, warmup: usize) -> Result<()> {
    if warmup == 0 {
        return Err(Error::NoWarmup);
    }
    if batch == 0 || images < 10 * batch {
        return Err(Error::TooFewImages {
            got: images,
            min: 10 * batch.max(1),
        });
    }
    Ok(())
}

/// `fps = images / seconds`.
pub fn fps(images: usize, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::NonPositiveTime);
    }
    Ok(images as f64 / seconds)
}

impl BenchReport {
    /// Builds a report from the timings of the post-warmup batches; the
    /// last batch may be partial, hence `images`.
    pub fn from_timings(
        node_name: impl Into<String>,
        model_variant: Variant,
        precision: Precision,
        batch_size: usize,
        images: usize,
        warmup_batches: usize,
        batch_seconds: Vec<f64>,
    ) -> Result<Self> {
        let wall_seconds: f64 = batch_seconds.iter().sum();
        Ok(Self {
            node_name: node_name.into(),
            model_variant,
            precision,
            images,
            fps: fps(images, wall_seconds)?,
            wall_seconds,
            warmup_batches,
            batch_seconds,
            batch_size,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ComparisonRow {
    pub node: String,
    pub variant: Variant,
    pub precision: Precision,
    pub fps: f64,
    /// fps divided by the slowest row's fps.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Comparison {
    /// Sorted by fps, fastest first.
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:<16} {:>12} {:>8}", "#", "node", "fps", "ratio");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<4} {:<16} {:>12.2} {:>7.2}x",
                alloc::format!("[{}]", i + 1),
                r.node,
                r.fps,
                r.ratio
            );
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "[{}] precision={}, variant={}",
                i + 1,
                r.precision.name(),
                variant_name(r.variant)
            );
        }
        s
    }

    /// Plot data with header `node,variant,precision,fps`.
    pub fn csv(&self) -> String {
        let mut s = String::from("node,variant,precision,fps\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.node,
                variant_name(r.variant),
                r.precision.name(),
                r.fps
            );
        }
        s
    }
}

pub fn compare_report(reports: &[BenchReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::NeedTwoReports { got: reports.len() });
    }
    let slowest = reports.iter().map(|r| r.fps).fold(f64::INFINITY, f64::min);
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            node: r.node_name.clone(),
            variant: r.model_variant,
            precision: r.precision,
            fps: r.fps,
            ratio: r.fps / slowest,
        })
        .collect();
    rows.sort_by(|a, b| b.fps.total_cmp(&a.fps));
    Ok(Comparison { rows })
}
