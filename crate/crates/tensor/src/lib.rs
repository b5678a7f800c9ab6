//! Dense tensors with reverse-mode differentiation, sized for small
//! spatio-temporal convolutional networks on the CPU.
//!
//! Every volume is laid out as `(B, C, T, H, W)`. Operations are recorded on a
//! [`Graph`] tape; [`Graph::backward`] returns gradients for the leaves.

pub mod error;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod real;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BackwardArgs, BackwardFn, Gradients, Graph, Var};
pub use ops::conv::{conv3d_backward, conv3d_forward, Conv3dSpec};
pub use ops::layout::{concat_time, pixel_shuffle, pixel_unshuffle, slice_time};
pub use ops::norm::{power_iteration, BatchStats};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use real::Real;
pub use tensor::Tensor;
