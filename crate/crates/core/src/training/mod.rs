//! Optimization of the density-matching objective in EFN and NF modes.

pub mod adam;
pub mod checkpoint;
pub mod objective;
pub mod trainer;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use objective::{efn_loss, loss_and_grad, Params};
pub use trainer::{stream, Mode, Model, Problem, StopReason, TrainConfig, TrainLogRecord, Trainer};
