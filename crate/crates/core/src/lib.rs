//! Gradient-guided weight perturbation (GGP) for a small vision-language
//! model, with the reverse-mode autodiff, optimizer, model, objectives,
//! synthetic data and experiment harness it runs on.
//!
//! The numeric core (`autodiff`, `optim`, `perturb`) is generic over
//! [`Scalar`]; the model and everything above it use `f64`.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod perturb;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type GradMap = autodiff::GradMap<f64>;
pub type AdamW = optim::AdamW<f64>;
