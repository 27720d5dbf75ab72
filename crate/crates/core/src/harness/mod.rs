//! Synthetic tasks, training, evaluation, checkpoints and verification.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod train;
pub mod verify;
