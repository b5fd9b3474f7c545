use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NcuError>;

#[derive(Debug, Error)]
pub enum NcuError {
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    ZeroRow { row: usize, norm: f64 },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("loss evaluated to a non-finite value at parameter {index}")]
    NonFiniteLoss { index: usize },

    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("batch of {0} items is too small to partition (need at least 2)")]
    BatchTooSmall(usize),

    #[error("invalid margins: need alpha < beta < 0, got alpha={alpha}, beta={beta}")]
    InvalidMargins { alpha: f64, beta: f64 },

    #[error("forget set is empty; the negative column would be fully masked")]
    EmptyForgetSet,

    #[error("mask is infeasible: {0}")]
    InfeasibleMask(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("empty subset: {0}")]
    EmptySubset(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("phase order error: {0}")]
    PhaseOrder(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
