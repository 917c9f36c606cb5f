//! Minimal CPU substrate: convolution, batch norm, linear layers, loss and
//! optimizers, each with a hand-written backward pass.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{cross_entropy, CrossEntropy};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, OptimizerState, Param};
pub use tensor::Tensor;
