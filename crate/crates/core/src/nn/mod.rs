//! Minimal `f64` autodiff and transformer layers used by every model part.

mod ctx;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use ctx::{Ctx, Mode};
pub use graph::{log_sum_exp, sigmoid, Gradients, Graph, KeyMask, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
