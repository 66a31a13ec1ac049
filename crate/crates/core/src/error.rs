use alloc::string::String;

use crate::graph::NodeId;
use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("data length {len} does not match shape volume {volume}")]
    LengthMismatch { len: usize, volume: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid quantization parameters: scale={scale}, zero_point={zero_point}")]
    InvalidQuantParams { scale: f32, zero_point: i32 },
    #[error("shape mismatch at node {node}: expected {expected}, found {found}")]
    ShapeMismatch {
        node: NodeId,
        expected: Shape,
        found: Shape,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "calibration set has {got} images; the calibration set has to be around 100-1000 images (use force to override)"
    )]
    CalibrationSize { got: usize },
    #[error("calibration statistics for node {node} are empty")]
    EmptyStats { node: NodeId },
    #[error("missing quantization parameters for node {node}")]
    MissingQuantParams { node: NodeId },
    #[error("batch norm node {node} does not directly follow a convolution")]
    BatchNormNotFoldable { node: NodeId },
    #[error("cyclic dependency involving node {node}")]
    Cycle { node: NodeId },
    #[error("batch size {got} outside [1, {max}]")]
    BatchSize { got: usize, max: usize },
    #[error("input quantization parameters do not match the plan input")]
    QuantParamsMismatch,
    #[error("loss inputs must be nonnegative")]
    NegativeLoss,
    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("frame dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("empty image")]
    EmptyImage,
    #[error("need at least 3 clusters to populate train/val/test, got {got}")]
    TooFewClusters { got: usize },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("no label for frame {frame}")]
    MissingLabel { frame: String },
    #[error("no results")]
    NoResults,
    #[error("benchmark needs at least {min} images, got {got}")]
    TooFewImages { got: usize, min: usize },
    #[error("warmup must be at least one batch")]
    NoWarmup,
    #[error("need >= 2 reports, got {got}")]
    NeedTwoReports { got: usize },
    #[error("elapsed time must be positive")]
    NonPositiveTime,
}
