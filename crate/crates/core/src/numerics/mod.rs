//! Dense tensors and reverse-mode differentiation.

mod finite_diff;
mod params;
mod real;
mod tape;
mod tensor;

pub use finite_diff::{check_gradients, relative_error, GradCheck, REL_FLOOR};
pub use params::{ParamId, ParamKind, ParamSet, Parameter};
pub use real::{DType, Real};
pub use tape::{hard_sigmoid_scalar, round_boundary, sigmoid_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
