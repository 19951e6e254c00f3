use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Fully connected layer, `out = x W^T + b`. Weight shape is
/// `(out_features, in_features, 1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LinearParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Tensor4::zeros([out_features, in_features, 1, 1]),
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    input: Tensor4<T>,
    weight: Tensor4<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor4<T>,
    pub params: LinearParams<T>,
}

/// `x` is a batch of flat vectors shaped `(B, 1, 1, in_features)`.
pub fn linear_forward<T: Scalar>(x: &Tensor4<T>, params: &LinearParams<T>) -> Result<(Tensor4<T>, LinearCache<T>)> {
    let [b, one_d, one_h, n_in] = x.shape();
    let n_out = params.out_features();
    if one_d != 1 || one_h != 1 || n_in != params.in_features() || params.bias.len() != n_out {
        return Err(Error::shape(format!(
            "linear: input {:?} vs weight {:?}",
            x.shape(),
            params.weight.shape()
        )));
    }
    let mut out = Tensor4::zeros([b, 1, 1, n_out]);
    for bi in 0..b {
        let xr = x.row(bi, 0, 0);
        for k in 0..n_out {
            let wr = &params.weight.data()[k * n_in..(k + 1) * n_in];
            let dot: T = xr.iter().zip(wr).map(|(&a, &w)| a * w).sum();
            *out.at_mut(bi, 0, 0, k) = dot + params.bias[k];
        }
    }
    Ok((
        out,
        LinearCache {
            input: x.clone(),
            weight: params.weight.clone(),
        },
    ))
}

pub fn linear_backward<T: Scalar>(cache: &LinearCache<T>, grad_out: &Tensor4<T>) -> Result<LinearGrads<T>> {
    let [b, _, _, n_in] = cache.input.shape();
    let n_out = cache.weight.shape()[0];
    grad_out.expect_shape([b, 1, 1, n_out], "linear_backward grad_out")?;
    let mut gx = Tensor4::zeros(cache.input.shape());
    let mut gp = LinearParams::zeros(n_in, n_out);
    for bi in 0..b {
        let xr = cache.input.row(bi, 0, 0);
        for k in 0..n_out {
            let g = grad_out.at(bi, 0, 0, k);
            gp.bias[k] += g;
            let wr = &cache.weight.data()[k * n_in..(k + 1) * n_in];
            let gw = &mut gp.weight.data_mut()[k * n_in..(k + 1) * n_in];
            for (dst, &xv) in gw.iter_mut().zip(xr) {
                *dst += g * xv;
            }
            for (dst, &wv) in gx.row_mut(bi, 0, 0).iter_mut().zip(wr) {
                *dst += g * wv;
            }
        }
    }
    Ok(LinearGrads {
        input: gx,
        params: gp,
    })
}
