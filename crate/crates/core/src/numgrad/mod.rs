//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! an adaptive-moment optimizer, a finite-difference gradient oracle and a
//! binary checkpoint container.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, FdConfig, FdReport};
pub use params::{AdamConfig, Param, ParamSet};
pub use tape::{logistic, Tape, Var, MIN_NORM};
pub use tensor::Tensor;

