//! Spatio-temporal dependency encoder: a depthwise-separable temporal stage
//! followed by a depthwise-separable full-height spatial stage.

use super::config::ModelConfig;
use super::params::{ListenNetParams, ParamGrads};
use crate::error::{Error, Result};
use crate::layers::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, ActivationCache, ConvCache,
};
use crate::tensor::{Activation, Scalar, Tensor4};

#[derive(Debug, Clone)]
pub struct StdeCache<T> {
    temporal_pointwise: ConvCache<T>,
    temporal_depthwise: ConvCache<T>,
    temporal_gelu: ActivationCache<T>,
    spatial_pointwise: ConvCache<T>,
    spatial_depthwise: ConvCache<T>,
    spatial_gelu: ActivationCache<T>,
}

/// `x: (B,1,C,T)` to `E_t: (B,D,C,T')` and `E_s: (B,D,1,T')`.
pub fn stde_forward<T: Scalar>(
    x: &Tensor4<T>,
    params: &ListenNetParams<T>,
    config: &ModelConfig,
) -> Result<(Tensor4<T>, Tensor4<T>, StdeCache<T>)> {
    let [_, depth, c, t] = x.shape();
    if depth != 1 || c != config.channels || t != config.window_len {
        return Err(Error::shape(format!(
            "input {:?} does not match (B,1,{},{})",
            x.shape(),
            config.channels,
            config.window_len
        )));
    }
    if t < config.k0 {
        return Err(Error::shape(format!("window {t} shorter than k0 {}", config.k0)));
    }
    let (a, temporal_pointwise) = conv2d_forward(x, &config.temporal_pointwise(), &params.temporal_pointwise)?;
    let (a, temporal_depthwise) = conv2d_forward(&a, &config.temporal_depthwise(), &params.temporal_depthwise)?;
    let (e_t, temporal_gelu) = activation_forward(&a, Activation::Gelu);
    let (a, spatial_pointwise) = conv2d_forward(&e_t, &config.spatial_pointwise(), &params.spatial_pointwise)?;
    let (a, spatial_depthwise) = conv2d_forward(&a, &config.spatial_depthwise(), &params.spatial_depthwise)?;
    let (e_s, spatial_gelu) = activation_forward(&a, Activation::Gelu);
    Ok((
        e_t,
        e_s,
        StdeCache {
            temporal_pointwise,
            temporal_depthwise,
            temporal_gelu,
            spatial_pointwise,
            spatial_depthwise,
            spatial_gelu,
        },
    ))
}

/// Back-propagates into the encoder. `grad_e_t` carries every gradient that
/// reached `E_t` from later blocks (multi-scale branches, depth alignment).
pub fn stde_backward<T: Scalar>(
    cache: &StdeCache<T>,
    mut grad_e_t: Tensor4<T>,
    grad_e_s: &Tensor4<T>,
    grads: &mut ParamGrads<T>,
) -> Result<Tensor4<T>> {
    let g = activation_backward(&cache.spatial_gelu, grad_e_s)?;
    let g = conv2d_backward(&cache.spatial_depthwise, &g)?;
    grads.spatial_depthwise = g.params;
    let g = conv2d_backward(&cache.spatial_pointwise, &g.input)?;
    grads.spatial_pointwise = g.params;
    grad_e_t.add_assign(&g.input)?;

    let g = activation_backward(&cache.temporal_gelu, &grad_e_t)?;
    let g = conv2d_backward(&cache.temporal_depthwise, &g)?;
    grads.temporal_depthwise = g.params;
    let g = conv2d_backward(&cache.temporal_pointwise, &g.input)?;
    grads.temporal_pointwise = g.params;
    Ok(g.input)
}
