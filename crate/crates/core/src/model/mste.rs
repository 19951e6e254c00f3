//! Multi-scale temporal enhancement: parallel dilated temporal convolutions,
//! suffix-truncated to a common length, concatenated, batch-normalized, then
//! collapsed over channels by a depthwise skip conv and resized back to `T'`.

use super::config::ModelConfig;
use super::params::{ListenNetParams, ParamGrads};
use crate::error::{Error, Result};
use crate::layers::{batchnorm_forward, conv2d_backward, conv2d_forward, norm_backward, ConvCache, NormCache, RunningStats};
use crate::tensor::{
    concat_depth, linear_resize_time, linear_resize_time_backward, slice_time_last, slice_time_last_backward,
    split_depth, Scalar, Tensor4,
};

#[derive(Debug, Clone)]
pub struct MsteCache<T> {
    branches: Vec<ConvCache<T>>,
    branch_widths: Vec<usize>,
    norm: NormCache<T>,
    skip: ConvCache<T>,
    t_min: usize,
}

impl<T> MsteCache<T> {
    pub fn norm(&self) -> &NormCache<T> {
        &self.norm
    }
}

pub struct MsteOutput<T> {
    pub e_s_prime: Tensor4<T>,
    pub u: Tensor4<T>,
    pub s: Tensor4<T>,
    pub cache: MsteCache<T>,
}

pub fn mste_forward<T: Scalar>(
    e_t: &Tensor4<T>,
    e_s: &Tensor4<T>,
    params: &ListenNetParams<T>,
    running: &RunningStats<T>,
    config: &ModelConfig,
    training: bool,
) -> Result<MsteOutput<T>> {
    let t_prime = e_t.shape()[3];
    let reach = (config.max_kernel() - 1) * config.dilation;
    if t_prime <= reach {
        return Err(Error::shape(format!(
            "time extent {t_prime} too short for dilated reach {reach}"
        )));
    }
    let t_min = t_prime - reach;
    let mut branches = Vec::with_capacity(config.mste_kernels.len());
    let mut branch_widths = Vec::with_capacity(config.mste_kernels.len());
    let mut truncated = Vec::with_capacity(config.mste_kernels.len());
    for (&k, p) in config.mste_kernels.iter().zip(&params.mste_branches) {
        let (y, cache) = conv2d_forward(e_t, &config.mste_branch(k), p)?;
        branch_widths.push(y.shape()[3]);
        truncated.push(slice_time_last(&y, t_min)?);
        branches.push(cache);
    }
    let refs: Vec<&Tensor4<T>> = truncated.iter().collect();
    let cat = concat_depth(&refs)?;
    let (u, norm) = batchnorm_forward(&cat, &params.mste_norm, running, training, T::lit(crate::layers::NORM_EPS))?;
    let (skip_out, skip) = conv2d_forward(&u, &config.mste_skip(), &params.mste_skip)?;
    let s = linear_resize_time(&skip_out, t_prime)?;
    let e_s_prime = e_s.add(&s)?;
    Ok(MsteOutput {
        e_s_prime,
        u,
        s,
        cache: MsteCache {
            branches,
            branch_widths,
            norm,
            skip,
            t_min,
        },
    })
}

/// Given the gradient reaching `S`, accumulates into `grad_e_t` and records
/// the block's parameter gradients.
pub fn mste_backward<T: Scalar>(
    cache: &MsteCache<T>,
    grad_s: &Tensor4<T>,
    grad_e_t: &mut Tensor4<T>,
    grads: &mut ParamGrads<T>,
) -> Result<()> {
    let g = linear_resize_time_backward(grad_s, cache.t_min)?;
    let g = conv2d_backward(&cache.skip, &g)?;
    grads.mste_skip = g.params;
    let g = norm_backward(&cache.norm, &g.input)?;
    grads.mste_norm = g.affine;
    let widths: Vec<usize> = cache.branches.iter().map(|_| g.input.shape()[1] / cache.branches.len()).collect();
    let parts = split_depth(&g.input, &widths)?;
    for (i, ((part, branch), &full_w)) in parts.iter().zip(&cache.branches).zip(&cache.branch_widths).enumerate() {
        let g = slice_time_last_backward(part, full_w)?;
        let g = conv2d_backward(branch, &g)?;
        grads.mste_branches[i] = g.params;
        grad_e_t.add_assign(&g.input)?;
    }
    Ok(())
}
