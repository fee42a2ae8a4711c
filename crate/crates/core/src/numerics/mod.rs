//! Dense tensors, a dynamic reverse-mode tape, Adam, and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use gradcheck::{central_difference, grad_check, grad_check_coords, Differentiable, FnPair};
pub use tape::{forward_backward, log_softmax, Gradients, NodeId, Tape};
pub use tensor::Tensor;
