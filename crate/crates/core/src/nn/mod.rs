//! Layer primitives used by the segmentation architectures.

mod conv;
mod norm;
mod pixel;
mod pool;

pub use conv::{conv2d, conv2d_transpose, ConvParams, Padding};
pub use norm::{batch_norm2d, BatchNormState, Mode, BN_EPSILON, BN_MOMENTUM};
pub use pixel::{argmax_channels, concat_channels, resize_bilinear, softmax_channels};
pub use pool::{max_pool2d, max_unpool2d, PoolIndices};
