//! Minimal CNN engine: tensors, the fixed layer set, backprop, and Adam.

mod adam;
mod network;
pub mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use network::{is_weight_param, Gradients, Layer, LayerKind, Mode, Network, ParamInfo, Trace};
pub use ops::{
    conv2d_forward, cross_entropy_loss, dense_forward, maxpool2d_forward, softmax, LOG_CLAMP,
};
pub use tensor::{Tensor, WeightStore};
