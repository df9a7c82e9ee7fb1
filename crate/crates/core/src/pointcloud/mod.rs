//! Multi-view depth prediction, fusion into point clouds, chamfer
//! evaluation, and PCD/OBJ output.

pub mod camera;
pub mod chamfer;
pub mod formats;
mod fuse;
pub mod generator;
pub mod synth;

pub use camera::{make_fixed_poses, Intrinsics, ViewPose};
pub use chamfer::{chamfer, mean_nearest, KdTree};
pub use formats::{format_g6, parse_pcd, pcd_to_obj, write_obj, write_pcd, PcdError};
pub use fuse::{fuse, DepthMapSet, DepthView, PointCloud};
pub use generator::{
    generate, generator_loss, predict_views, train_generator, GeneratorConfig, GeneratorSpec,
    LossWeights,
};
pub use synth::{CellShape, GeneratorSample};
