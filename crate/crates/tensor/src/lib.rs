//! Dense channel-last tensors, a tape-based reverse-mode differentiator
//! covering the layers of the lesion classification networks, and Adam.

mod adam;
mod error;
mod float;
pub mod gradcheck;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{BatchStats, Graph, NormMode, Padding, Var, BCE_EPS};
pub use kernels::softmax_row;
pub use param::Param;
pub use tensor::Tensor;
