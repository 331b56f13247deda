//! Desk-scale training harness: models, losses, optimizers, datasets, the
//! training loop and the layer-wise error study.

pub mod config;
pub mod data;
pub mod loss;
pub mod model;
pub mod optim;
pub mod study;
pub mod train;

pub use config::RunConfig;
pub use data::{Batch, Dataset};
pub use model::{Layer, Model, TraceOptions};
pub use train::{train, TrainConfig, TrainMode, TrainRecord};
