use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("inconsistent prefix: {0}")]
    InconsistentPrefix(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: u64, lr: f64, loss: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
