//! Desk-scale federated-learning simulator built around a single shared
//! image: deterministic patch generation, model-driven pruning of the
//! distillation set, and an ensemble-distillation round loop that supports
//! parameter-averaging schedules and heterogeneous client architectures.

pub mod config;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod partition;
pub mod patchgen;
pub mod pruning;
mod wire;

pub use error::{Error, Result};
pub use tensor::{LogitMatrix, Tensor};
