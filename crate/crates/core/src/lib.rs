//! Distributed checkpointing for simulated TP/DP/PP (+ZeRO) training jobs.
//!
//! Checkpoints are stored in a parallelism-agnostic form and resharded when
//! loaded into a different configuration. The entry points are
//! [`checkpoint::Checkpointer`] for saving and [`checkpoint::load_checkpoint`]
//! for loading.

pub mod barrier;
pub mod checkpoint;
pub mod comm;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod loader;
pub mod metadata;
pub mod metrics;
pub mod planner;
pub mod scenario;
pub mod sharding;
pub mod storage;

pub use checkpoint::{load_checkpoint, Checkpointer, LoadOptions, LoadedCheckpoint, SaveOptions, TrainingState};
pub use error::{Error, Result};
pub use sharding::{ModelSpec, ShardingSpec, TensorSpec, ZeroMode};
