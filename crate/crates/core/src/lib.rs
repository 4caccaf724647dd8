//! Action-to-reaction motion synthesis: unit-split motion tokenizer, masked
//! reaction transformer with per-token diffusion heads, and evaluation metrics.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod reactor;
pub mod real;
pub mod rng;
pub mod train;
pub mod vae;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::{Activation, Gradients, ParamStore, Tape, Tensor, Var};
