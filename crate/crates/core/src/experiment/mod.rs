//! Run configuration, checkpoints and the end-to-end experiment loop.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{file_hash, Checkpoint, ModelDescriptor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{PretrainData, RunConfig, Schedule, Seeds};
pub use run::*;

#[cfg(test)]
mod tests;
