use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite function value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },
    #[error("attention row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("rotation operators need an even dimension, got {0}")]
    OddDimension(usize),
    #[error("operator is singular within tolerance (pivot {pivot:e})")]
    Singular { pivot: f64 },
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("misaligned input at index {index}: {message}")]
    Misaligned { index: usize, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<crate::schema::Violation>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad snapshot format at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("checkpoint config hash {found:016x} does not match expected {expected:016x}")]
    ConfigHash { expected: u64, found: u64 },
    #[error("repository is not frozen; approximate search needs a built index")]
    NotFrozen,
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("{0}")]
    Objective(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn summarize(violations: &[crate::schema::Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
