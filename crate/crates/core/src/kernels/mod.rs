//! Differentiable layer primitives.
//!
//! Each kernel is a free function pair (`*_fwd` / `*_bwd`) over [`Tensor`]s,
//! generic in precision. Forward passes return whatever intermediate state
//! the matching backward pass needs, so the graph layer above can stay a thin
//! scheduler. Activations use NCHW layout throughout.

mod conv;
mod dense;
mod norm;
mod pool;
mod softmax;

pub use conv::{conv2d_bwd, conv2d_fwd, conv_out_hw, ConvCache};
pub use dense::{
    dropout_bwd, dropout_fwd, fc_bwd, fc_fwd, relu_bwd, relu_fwd,
};
pub use norm::{
    batchnorm_bwd_eval, batchnorm_bwd_train, batchnorm_fwd_eval, batchnorm_fwd_train,
    bn_running_update, BnCache,
};
pub use pool::{maxpool_bwd, maxpool_fwd, PoolSwitches};
pub use softmax::{softmax_ce, softmax_ce_batch, BatchXent};
