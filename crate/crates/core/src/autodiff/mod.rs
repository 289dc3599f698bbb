//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_params, finite_difference_check, relative_error, ParamCheckReport, RELATIVE_ERROR_FLOOR};
pub use params::{BoundParams, GradMap, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
