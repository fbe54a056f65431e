//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input vector or matrix has the wrong shape.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A right-hand side, Jacobian or state became non-finite.
    #[error("non-finite value encountered: {0}")]
    Overflow(String),

    /// Invalid configuration or precondition violation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Newton iteration failed even at the minimum step size.
    #[error("stiff failure at t = {t:e}: Newton did not converge with h = {h:e}")]
    StiffFailure { t: f64, h: f64 },

    /// Error control requested a step below `h_min`.
    #[error("step size underflow at t = {t:e}: requested h = {h:e}")]
    StepSize { t: f64, h: f64 },

    /// Every seed trajectory failed during range estimation.
    #[error("range estimation failed: {0}")]
    Range(String),

    /// Eigenbasis is defective or too ill-conditioned.
    #[error("eigen-decomposition failed: {0}")]
    Decomposition(String),

    /// Box-Cox preprocessing of an invalid value.
    #[error("preprocessing error in dimension {dim}: {msg}")]
    Preprocess { dim: usize, msg: String },

    #[error("inference error: {0}")]
    Inference(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}, batch {batch} (max |grad| = {max_grad:e})")]
    Training {
        epoch: usize,
        batch: usize,
        max_grad: f64,
    },

    #[error("model step dt = {model:e} does not match requested dt = {requested:e}")]
    DtMismatch { model: f64, requested: f64 },

    /// Malformed model or dataset file.
    #[error("format error: {0}")]
    Format(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
