//! Forward and backward passes for the layer vocabulary of the network.

mod activation;
mod concat;
pub(crate) mod conv;
mod fc;
mod lrn;
mod pool;
mod softmax;

pub use activation::{relu, relu_backward};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv1x1_forward, conv_backward, conv_forward, ConvGrads, ConvParams};
pub use fc::{fc_backward, fc_forward, FcGrads};
pub use lrn::{lrn_backward, lrn_backward_with, lrn_forward, LrnAdjoint, LrnParams};
pub use pool::{maxpool_backward, maxpool_forward, PoolIndexMap};
pub use softmax::{softmax, softmax_xent};
