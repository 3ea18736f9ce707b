use alloc::string::String;
use core::fmt;

/// Crate-wide error type. Variants carry enough structure for callers to
/// map them onto process exit codes or retry decisions.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A batch fed to a layer whose input width does not match.
    LayerInputMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    /// Generic shape disagreement (SGD step, averaging, checkpoint load).
    ShapeMismatch { context: String },
    /// An operation that needs at least one element got none.
    Empty { what: &'static str },
    /// `backward` was called on a node whose value is not 1x1.
    NotScalarLoss { rows: usize, cols: usize },
    /// A second backward pass was requested without a fresh forward.
    TapeConsumed,
    /// A tape node id from a different or reset tape.
    InvalidNode { index: usize },
    /// Categorical value outside `0..arity`.
    CategoryOutOfRange { value: usize, arity: usize },
    /// A config field failed validation.
    InvalidConfig { reason: String },
    /// Training produced a non-finite loss; indices identify the step.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// Non-finite values where finite ones are required.
    NonFiniteInput { what: &'static str },
    /// An evaluation split with fewer than the required samples.
    TooFewSamples { needed: usize, got: usize },
    /// An evaluation split whose target column has a single class.
    DegenerateSplit { what: &'static str },
    /// A conditional distribution with zero-mass condition.
    UndefinedConditional { value: usize },
    /// Entropy argument outside the domain of the accuracy bound.
    EntropyOutOfRange { value: f64 },
    /// Text parse failure (checkpoint or dataset), 1-based line number.
    Parse { line: usize, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::LayerInputMismatch {
                layer,
                expected,
                got,
            } => write!(
                f,
                "layer {layer} expects input width {expected}, got {got}"
            ),
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::Empty { what } => write!(f, "{what} must be non-empty"),
            Error::NotScalarLoss { rows, cols } => {
                write!(f, "loss node must be 1x1, got {rows}x{cols}")
            }
            Error::TapeConsumed => write!(f, "tape already consumed by backward; re-run forward"),
            Error::InvalidNode { index } => write!(f, "node id {index} not on this tape"),
            Error::CategoryOutOfRange { value, arity } => {
                write!(f, "categorical value {value} out of range for arity {arity}")
            }
            Error::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::NonFiniteInput { what } => write!(f, "non-finite values in {what}"),
            Error::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            Error::DegenerateSplit { what } => {
                write!(f, "degenerate split: {what} has a single class")
            }
            Error::UndefinedConditional { value } => {
                write!(f, "conditional on value {value} undefined: zero marginal mass")
            }
            Error::EntropyOutOfRange { value } => {
                write!(f, "entropy {value} outside (0, 1]; bound undefined above 1")
            }
            Error::Parse { line, reason } => write!(f, "parse error at line {line}: {reason}"),
        }
    }
}

impl core::error::Error for Error {}
