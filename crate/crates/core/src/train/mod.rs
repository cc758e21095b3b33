//! Optimisation, the training loop, evaluation and artifacts.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Profile, TrainConfig};
pub use metrics::MetricsReport;
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, train, EpochLog, Trainer};
