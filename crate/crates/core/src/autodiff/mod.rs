//! Dense tensors, a reverse-mode autodiff graph, and the AdamW optimizer.

mod adamw;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState, Moments};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
pub mod suite;
