use thiserror::Error;

/// Errors produced by the compression kernels and the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate feature vector (zero norm)")]
    DegenerateFeature,

    #[error("degenerate feature vector at token row {row} (zero norm)")]
    DegenerateRow { row: usize },

    #[error("degenerate frame feature for frame {frame} (zero mean vector)")]
    DegenerateFrameFeature { frame: usize },

    #[error("degenerate group representative {group} (zero norm)")]
    DegenerateRepresentative { group: usize },

    #[error("non-finite value at token row {row}, dim {dim}")]
    NonFinite { row: usize, dim: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("selection is empty")]
    EmptySelection,

    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("token budget {k} out of range 1..={n}")]
    BudgetOutOfRange { k: usize, n: usize },

    #[error("threshold {name} = {value} out of range [{min}, {max}]")]
    ThresholdOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error(
        "budget cannot cover one token plus marker per group: token_max {token_max} < 2 x {groups} groups"
    )]
    BudgetTooSmall { token_max: usize, groups: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
