//! Phased training of retriever and reader, checkpointing and inference.

pub mod config;
pub mod engine;
pub mod infer;
pub mod model;
pub mod step;

pub use config::{model_problems, ModelConfig, TrainConfig, TrainMode};
pub use engine::{latest_checkpoint, plan, Checkpoint, EpochRecord, Phase, RunDir, TrainData, TrainState, Trainer};
pub use infer::{predict, score, PredictOutput};
pub use model::Model;
