//! Differentiable layer primitives. Each forward returns its output and a
//! cache; the matching backward maps an upstream gradient to input and
//! parameter gradients.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;

pub use activation::{activation_backward, activation_forward, gelu_grad, sigmoid_grad, ActivationCache};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGrads, ConvParams, ConvSpec};
pub use linear::{linear_backward, linear_forward, LinearCache, LinearGrads, LinearParams};
pub use norm::{
    batchnorm_forward, groupnorm_forward, norm_backward, BatchStats, NormAffine, NormCache, NormGrads,
    RunningStats, BN_MOMENTUM, NORM_EPS,
};
