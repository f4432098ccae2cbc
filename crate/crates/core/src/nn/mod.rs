//! Dense tensors, tape-based reverse-mode differentiation for the layer set
//! used by the compact CNN, weight initialization, and SGD with momentum.

pub mod checkpoint;
mod gemm;
pub mod init;
pub mod loss;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub(crate) use gemm::dgemm;
pub use init::{fan_in, he_normal};
pub use loss::softmax_cross_entropy;
pub use optim::{lr_schedule, sgd_nesterov_step, LrSchedule, OptimizerConfig, Parameter};
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;
