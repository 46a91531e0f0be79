//! A small reverse-mode autodiff kernel: tensors, a per-step op tape,
//! Adam, and a finite-difference gradient checker.
//!
//! Training runs in `f32`; the checker instantiates the same generic ops
//! in `f64` so finite-difference baselines are not drowned by rounding.

mod adam;
mod conv;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, ForwardEval, GradCheckConfig, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{BnState, Mode, NodeId, Tape, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
