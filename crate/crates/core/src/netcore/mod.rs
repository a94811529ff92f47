//! Dense tanh networks on two-scale features: evaluation, exact spatial
//! derivatives and exact parameter gradients.

mod batch;
pub mod blob;
mod grad;
mod kernels;
mod mlp;
mod twoscale;

pub use batch::{
    backward_batch, eval_net, eval_values, forward_batch, BatchEval, Derivatives, NetEval,
    PointEval, Seeds, Tape,
};
pub use grad::{
    loss_components, loss_param_gradient, Components, EvalOptions, FlatGradient, LossGradient,
    NetPair, PointGroup, PointwiseLoss, Seed, CHUNK_POINTS,
};
pub use kernels::{kernel_name, tanh_fast};
pub use mlp::{forward, init_params, param_count, Activation, MlpParams, FLATTEN_VERSION};
pub use twoscale::{two_scale_features, TwoScaleConfig};
