//! Training, evaluation, checkpoints, gradient checking of the full model,
//! heatmap export and configuration files.

mod checkpoint;
pub mod config;
mod gradcheck;
mod heatmap;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, OptimizerState, ParamEntry};
pub use config::Settings;
pub use gradcheck::{model_gradcheck, tiny_batch};
pub use heatmap::{export_heatmaps, heat, normalize_min_max, overlay};
pub use optim::{AdamW, OneCycle};
pub use train::{
    evaluate_model, train, train_step, EpochRecord, EvalResult, TrainConfig, TrainOutcome,
};
