//! Core engine for blood-cell malaria diagnosis: a small CNN library, a
//! VGG-style classifier with a transfer head, dataset handling, training and
//! pruning, and single-image point-cloud reconstruction.

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type WeightStore32 = nn::WeightStore<f32>;
pub type WeightStore64 = nn::WeightStore<f64>;
