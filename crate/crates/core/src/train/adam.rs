use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ListenNetParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps refused because a gradient was not finite.
    pub skipped: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for tensors of the given lengths.
    pub fn with_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = lengths.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }

    pub fn for_params(params: &ListenNetParams<T>) -> Self {
        Self::with_lengths(params.tensors().iter().map(|(_, _, t)| t.len()))
    }
}

/// One Adam update over parallel lists of parameter and gradient slices.
/// Returns `false` (and leaves everything untouched) if any gradient is
/// not finite.
pub fn adam_update<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    let lens_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !lens_match {
        return Err(Error::shape("adam: parameter, gradient and state shapes differ"));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        state.skipped += 1;
        warn!("non-finite gradient; optimizer step skipped ({} so far)", state.skipped);
        return Ok(false);
    }
    state.t += 1;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let c1 = T::lit(1.0 - state.beta1.powi(state.t as i32));
    let c2 = T::lit(1.0 - state.beta2.powi(state.t as i32));
    let lr = T::lit(lr);
    let wd = T::lit(weight_decay);
    let eps = T::lit(state.eps);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            let gi = g[i] + wd * p[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

pub fn adam_step<T: Scalar>(
    params: &mut ListenNetParams<T>,
    grads: &ListenNetParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    let grad_views: Vec<&[T]> = grads.tensors().into_iter().map(|(_, _, g)| g).collect();
    let mut param_views: Vec<&mut [T]> = params.tensors_mut().into_iter().map(|(_, _, p)| p).collect();
    adam_update(&mut param_views, &grad_views, state, lr, weight_decay)
}
