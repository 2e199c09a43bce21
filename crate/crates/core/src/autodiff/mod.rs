//! Minimal reverse-mode automatic differentiation: tensors, a recording tape
//! with the handful of primitives a mobile-style supernet needs, optimizers,
//! a cosine schedule and a central-difference gradient oracle.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use optim::{cosine_lr, AdamConfig, OptimizerKind, OptimizerState, SgdConfig};
pub use params::{ParamKind, ParamSet, Parameter};
pub use tape::{Gradients, Primitive, Tape, Var, BN_EPS};
pub use tensor::Tensor;
