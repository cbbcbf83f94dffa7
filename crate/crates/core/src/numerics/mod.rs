//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records primitive applications in evaluation order; a single
//! reverse sweep from a scalar loss yields gradients for every leaf that
//! requires them. Values are generic over [`Scalar`] so the same model code
//! runs in `f32` for training and in `f64` for tight gradient checks.

mod gradcheck;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check};
pub use primitive::{causal_mask, AttrValue, Attrs, Primitive, MASK_FILL};
pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {primitive}: {detail}")]
    ShapeMismatch { primitive: &'static str, detail: String },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("primitive `{primitive}` is missing attribute `{key}`")]
    MissingAttribute { primitive: String, key: String },
    #[error("primitive `{primitive}` has a mistyped attribute `{key}`")]
    BadAttribute { primitive: String, key: String },
    #[error("non-finite output from {primitive}")]
    NonFinite { primitive: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any gradient-requiring tensor")]
    DetachedLoss,
    #[error("function is not deterministic: {first} then {second} at the same point")]
    NonDeterministic { first: f64, second: f64 },
    #[error("finite-difference step {0} outside (0, 0.1]")]
    BadStep(f64),
}
