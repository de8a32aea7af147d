//! A small CPU tensor library with hand-written backward passes, the
//! two-stream network, its loss, and the trainer.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
mod scalar;
mod tensor;
pub mod train;

pub(crate) use layers::join;
pub use layers::{argmax_rows, cross_entropy, softmax, Module};
pub use loss::{total_loss, LossBreakdown};
pub use model::{ModelOutput, NoiseInput, TMFNet, TMFNetConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{BatchSource, EpochLog, InMemoryDataset, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout on.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Copies batch statistics into the running ones, then acts as `Eval`.
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Param,
    Buffer,
}
