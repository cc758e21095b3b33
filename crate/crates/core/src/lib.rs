//! Label-signal-guided multimodal emotion recognition on precomputed audio
//! and text features.
//!
//! The building blocks are a small reverse-mode autodiff tape ([`Tape`]),
//! attention and recurrent encoders on top of it, label-embedding
//! enhancement, gated fusion, and a training loop with evaluation and
//! checkpointing.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod fusion_head;
pub mod lsma;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod reference;

pub use autodiff::{grad_check, GradCheckReport, Gradients, Tape, Var};
pub use data_io::{load_dataset, Dataset, Sample, Split};
pub use error::{Error, Result};
pub use model::{Ablation, Model, ModelDims};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
pub use train::{Checkpoint, MetricsReport, TrainConfig, Trainer};
