//! Supervised training of the gate parameters by backpropagation through
//! the unrolled filter, and evaluation against ground truth.

mod evaluate;
mod loss;
mod optim;
mod train;

pub use evaluate::{
    evaluate, evaluate_baseline, score, Evaluation, MethodMetrics, TrajectoryMetrics,
};
pub use loss::{loss_and_gradient, loss_batch, loss_on_tape, loss_trajectory, LossGradient};
pub use optim::{clip_global_norm, Adam, AdamSettings};
pub use train::{train, train_with, EpochRecord, TrainConfig, TrainOutcome, TrainReport};
