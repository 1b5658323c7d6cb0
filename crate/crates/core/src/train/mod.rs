//! Optimiser, learning-rate schedule, and the shared epoch loop.

mod optimizer;
mod runner;
mod schedule;

pub use optimizer::{clip_grad_norm, AdamWConfig, OptimizerState};
pub use runner::{
    restore, run_training, BatchLoss, BestSnapshot, History, HistoryRow, Objective, TrainConfig, TrainOutcome,
};
pub use schedule::{CyclicalSchedule, LrBounds};
