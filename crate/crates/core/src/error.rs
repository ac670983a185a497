use thiserror::Error;

/// Errors raised by the engine, the losses, the SI bookkeeping and the federation runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("consolidation repeated without intervening training")]
    RepeatedConsolidation,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("transfer from a center to itself ({0})")]
    SelfTransfer(usize),
    #[error("training diverged at center {center}, epoch {epoch}, step {step}: {what}")]
    Diverged {
        center: usize,
        epoch: usize,
        step: usize,
        what: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Length { expected, got })
    }
}
