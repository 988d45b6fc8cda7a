//! Sparse optimization through redundant factorization.
//!
//! The central idea: an L1-penalized parameter `V` can be replaced by a
//! product of two factors (`U ⊗ W` elementwise, or `u·W` for a group)
//! penalized with plain L2. At every minimum the factors balance and the
//! smooth factored objective coincides with the original L1 objective, so
//! ordinary gradient methods recover genuinely sparse solutions.
//!
//! The crate provides:
//! - a small dense-tensor type with reverse-mode differentiation
//!   ([`tensor`], [`graph`]),
//! - the factored-parameter machinery and its invariants ([`spred`]),
//! - first-order and quasi-Newton optimizers ([`optim`]),
//! - independent reference solvers for lasso, group lasso and sparse
//!   coding ([`oracles`]),
//! - end-to-end experiment drivers producing machine-readable reports
//!   ([`tasks`]),
//! - a self-check suite covering the equivalence theorems ([`verify`]).

pub mod graph;
pub mod optim;
pub mod oracles;
pub mod spred;
pub mod tasks;
pub mod tensor;
pub mod threads;
pub mod verify;

pub use graph::{Activation, GradientMap, Tape, Var};
pub use spred::{SparsifyPolicy, SpredMode, SpredModel, SpredParam};
pub use tensor::Tensor;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("design is not orthonormal: max |X'X - I| = {deviation:.3e}")]
    NotOrthonormal { deviation: f64 },
    #[error("non-finite objective at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
pub(crate) mod test_util;
