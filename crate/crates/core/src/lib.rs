//! Desk-scale surgical action-triplet recognition.
//!
//! The crate implements the full pipeline as a small, deterministic,
//! CPU-only library in 64-bit floats:
//!
//! - [`tensor`]: dense row-major tensors, stable elementwise math, SGD with
//!   momentum, and a central-difference gradient oracle.
//! - [`nn`]: linear / MLP / multi-head attention layers, each with a
//!   hand-written backward pass.
//! - [`knowledge`]: instrument-anchored attribute phrases (tip / wrist /
//!   shaft), sentence templating, and deterministic stub text embeddings.
//! - [`pool`]: Gaussian-mixture prompt pools with top-k retrieval and
//!   prefix-row construction for attention injection.
//! - [`model`]: the temporal attention backbone, the temporal-spatial task
//!   adapter, feature fusion, and the four task classifier heads.
//! - [`loss`]: decomposed binary cross-entropy, the head/medium/tail
//!   taxonomy, coordinated gradient masking, and baseline imbalance losses.
//! - [`synth`]: synthetic long-tailed compositional triplet video datasets.
//! - [`metrics`]: the average-precision metric family.
//! - [`train`]: the training loop, gradient-dynamics tracing, evaluation,
//!   and the ablation harness.

pub mod knowledge;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimension mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A value that must stay finite became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),
    /// Knowledge file violates the expected schema.
    #[error("knowledge schema: {0}")]
    Schema(String),
    /// A structured data file is malformed or inconsistent.
    #[error("data format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
