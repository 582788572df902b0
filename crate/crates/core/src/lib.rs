//! Selective state-space optical flow.
//!
//! Two frames go through a shared convolutional backbone, a stack of
//! bidirectional selective-scan blocks that mix the two feature maps,
//! all-pairs global matching for an initial flow, and a few recurrent
//! refinement steps.

pub mod autograd;
pub mod blocks;
pub mod color;
pub mod flo;
pub mod gradcheck;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod polymamba;
pub mod pulse;
pub mod scalar;
pub mod selftest;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
