//! Random Hierarchy Model laboratory: grammar sampling and parsing, few-shot
//! episode construction, a small transformer with hand-written gradients,
//! AdamW training, an exact Bayes-optimal oracle and attention analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grammar;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};
