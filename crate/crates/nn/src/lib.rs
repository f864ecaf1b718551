//! Minimal dense-tensor neural-network substrate.
//!
//! Layers are plain functions: a forward function computes the output from
//! an input and a [`LayerParams`], and the matching `*_backward` function
//! recomputes what it needs from the same input and returns gradients for
//! the input and the parameters. Networks compose them explicitly, which
//! keeps gradient flow auditable and lets [`gradcheck`] verify every layer
//! in isolation.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::{conv2d, conv2d_backward, conv3d, conv3d_backward, LayerGrads};
pub use error::{NnError, Result};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use layers::{linear, linear_backward, max_pool2d, max_pool2d_backward, relu, relu_backward};
pub use loss::{smooth_l1, softmax, softmax_cross_entropy, two_class_probability, LossOutput};
pub use optim::{adam_step, OptimizerConfig};
pub use params::{LayerParams, ParamGrads};
pub use tensor::Tensor;
