//! Dataset ingestion, splits, augmentation, and the NPY reader.

mod augment;
pub mod cells;
mod dataset;
pub mod image;
pub mod npy;

pub use augment::{augment, rotate, sample_rng, AugmentConfig, Transform};
pub use dataset::{
    load_dataset, split, split_labels, DatasetLayout, DatasetSplit, LabeledImage, LoadReport,
    SplitRatios, CLASS_DIRS, NIH_REPORTED_COUNT,
};
pub use npy::{parse_npy, write_npy_f32, NpyArray, NpyData, NpyError};
