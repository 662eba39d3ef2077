//! Synthetic data, optimizer, metrics and the training loop.

pub mod data;
pub mod metrics;
pub mod optim;
mod trainer;

pub use data::{gen_split, gen_synthetic_dataset, stack, SyntheticSample, PALETTE};
pub use metrics::{miou, ConfusionMatrix, MiouReport};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use trainer::{
    evaluate, metrics_csv, moving_average, train, LogRow, TrainConfig, TrainReport, CHECKPOINT_FILE, METRICS_FILE,
};
