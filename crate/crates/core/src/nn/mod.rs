//! Minimal deterministic differentiable-network engine: the five layer
//! kinds, softmax cross-entropy, plain SGD, weight averaging and a binary
//! weights container.

pub mod layers;
pub mod loss;
pub mod ops;
pub mod serial;
pub mod tensor;
pub mod weights;

pub use layers::{LayerSpec, ModelSpec};
pub use loss::{accuracy, loss_ce};
pub use ops::{backward, forward, ForwardCache};
pub use serial::{deserialize, serialize};
pub use tensor::{Tensor, TensorShape};
pub use weights::{compose, fedavg, init_model, sgd_step, sgd_step_inplace, split, Gradients, Weights};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("weight layouts differ")]
    LayoutMismatch,
    #[error("cannot aggregate an empty set of weights")]
    EmptyAggregation,
    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("bad container magic")]
    BadMagic,
    #[error("truncated container: wanted {wanted} bytes at offset {at}, total {len}")]
    Truncated { at: usize, wanted: usize, len: usize },
    #[error("malformed container: {0}")]
    BadContainer(String),
}
