// Validation uses `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod align;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
mod linalg;
pub mod train;
pub mod losses;
pub mod nn;
pub mod params;
pub mod tensor;

pub use align::AlignmentMap;
pub use autodiff::{Gradients, Tape, Var};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
