//! Training: configuration, learning-rate schedule, AdamW, batching, loss
//! logs and the training loop.

mod config;
mod data;
mod log;
mod optim;
mod schedule;
mod trainer;

pub use config::{RunConfig, TrainConfig};
pub use data::{make_batches, Batch, BatchStream, Dataset, Split};
pub use log::{LossLog, LossRecord};
pub use optim::{adamw_update, clip_grad_norm, global_norm, AdamHyper, AdamW};
pub use schedule::lr_at;
pub use trainer::{train, TrainOptions, TrainOutcome};
