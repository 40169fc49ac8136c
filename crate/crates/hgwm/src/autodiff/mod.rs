//! Reverse-mode automatic differentiation over dense f64 tensors.

mod archive;
mod params;
mod tape;
mod tensor;

pub use archive::Archive;
pub use params::ParamStore;
pub use tape::{log_sum_exp, sigmoid, softmax_into, softplus, CustomOp, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
