//! Forward and backward kernels for every layer kind.
//!
//! Activations are batched: `(N, C, H, W)` for spatial data and `(N, F)` for
//! fully-connected data. Each backward function takes whatever its forward
//! cached and returns gradients with the same shapes as the forward inputs.

mod conv;
mod dropout;
mod fc;
mod fnl;
mod lrn;
mod pool;
mod relu;
mod softmax;

pub use conv::{conv_backward, conv_forward, conv_shape, ConvGrads, ConvParams, ConvSpec};
pub use dropout::{dropout_backward, dropout_forward, DropoutParams};
pub use fc::{fc_backward, fc_forward, FcGrads, FcParams};
pub use fnl::{
    fnl_backward, fnl_backward_slice, fnl_forward, fnl_infer, fnl_normalize_slice, FnlCache, FnlLayout,
    FnlState, Granularity, FNL_DEFAULT_EPS, FNL_DEFAULT_MOMENTUM,
};
pub use lrn::{lrn_backward, lrn_forward, LrnParams};
pub use pool::{pool_backward, pool_forward, pool_shape, PoolCache, PoolKind, PoolSpec};
pub use relu::{relu_backward, relu_forward};
pub use softmax::{softmax_loss_backward, softmax_loss_forward, softmax_rows};

/// Execution phase of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}
