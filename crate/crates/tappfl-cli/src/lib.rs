//! Experiment harness around `tappfl-core`: config files, dataset
//! ingestion, deterministic orchestration, and metrics emission.
//!
//! The binary in `main.rs` is a thin command dispatcher; everything it
//! does lives here so integration tests can drive the same code paths
//! directly.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod runner;

/// Errors that decide the process exit code.
///
/// Exit codes: 0 success, 2 config or experiment-setup error (including
/// unreadable or malformed dataset files), 3 numeric failure during
/// training (non-finite loss), 1 anything else (IO, internal bugs).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Wraps a core error so `main` can map it to the right exit code.
pub fn lift(e: tappfl_core::Error) -> anyhow::Error {
    use tappfl_core::Error as E;
    match e {
        E::NonFiniteLoss { .. } | E::NonFiniteInput { .. } | E::NotScalarLoss { .. } => {
            CliError::Numeric(e.to_string()).into()
        }
        E::InvalidConfig { .. }
        | E::TooFewSamples { .. }
        | E::Empty { .. }
        | E::ShapeMismatch { .. }
        | E::DegenerateSplit { .. }
        | E::CategoryOutOfRange { .. }
        | E::UndefinedConditional { .. }
        | E::EntropyOutOfRange { .. }
        | E::Parse { .. } => CliError::Config(e.to_string()).into(),
        other => anyhow::Error::new(other),
    }
}
