//! Dense tensors, named parameter stores and a reverse-mode autodiff tape.

mod dense;
mod grad_check;
mod params;
mod tape;

pub use dense::Tensor;
pub use grad_check::{grad_check, grad_check_params};
pub use params::ParamStore;
pub use tape::{Activation, Gradients, Tape, Var};
