//! Convolution, pooling, normalization, activation, resampling and loss ops.

mod act;
mod conv;
mod loss;
mod norm;
mod pool;
mod resample;

pub use act::{activation, relu, sigmoid, sigmoid_op, Activation};
pub use conv::{conv2d, conv2d_forward, ConvSpec};
pub use loss::{cross_entropy, cross_entropy_forward, IGNORE_LABEL};
pub use norm::{batchnorm2d, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{channel_pool, channel_pool_forward, PoolMode};
pub use resample::{upsample_nearest, upsample_nearest_forward};
