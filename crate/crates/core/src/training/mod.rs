//! Training loop, evaluation metrics, and magnitude pruning.

pub mod calibrate;
pub mod metrics;
pub mod prune;
mod train;

pub use calibrate::calibrate_head;
pub use metrics::{evaluate, evaluate_serial, predict_all, Metrics};
pub use prune::{
    decode_sparse, encode_sparse, prune_magnitude, sparsity, PruneConfig, PruneMask, PruneReport,
    PruneScope,
};
pub use train::{fine_tune, train, EpochRecord, History, TrainConfig, DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_SEED};
