//! Cross-nested attention.
//!
//! Both feature maps are regrouped into `G` groups along depth. Each branch
//! is gated by sigmoids of its width-pooled and height-pooled summaries and
//! group-normalized (`F_1`, `F_2`). Softmax attention vectors from each
//! branch then attend over the other branch's features, and the two maps are
//! fused by a shared pointwise conv into per-time weights `W`, which rescale
//! `F_s` through a sigmoid.

use super::config::ModelConfig;
use super::params::{ListenNetParams, ParamGrads};
use crate::error::{Error, Result};
use crate::layers::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, groupnorm_forward, norm_backward,
    ActivationCache, ConvCache, NormAffine, NormCache, NORM_EPS,
};
use crate::tensor::{
    adaptive_avg_pool, adaptive_avg_pool_backward, concat_depth, matmul_batched, matmul_batched_backward, sigmoid,
    split_depth, Activation, Axis, Scalar, Tensor4,
};

/// Parameter-free depth alignment: pools the channel (height) axis of `E_t`
/// from `C` down to `d_depth` rows.
pub fn depth_align<T: Scalar>(e_t: &Tensor4<T>, d_depth: usize) -> Result<Tensor4<T>> {
    let [_, _, c, t] = e_t.shape();
    if c < d_depth {
        return Err(Error::shape(format!(
            "depth_align: {c} channels cannot be aligned to depth {d_depth}"
        )));
    }
    adaptive_avg_pool(e_t, d_depth, t)
}

pub fn depth_align_backward<T: Scalar>(grad: &Tensor4<T>, e_t_shape: [usize; 4]) -> Result<Tensor4<T>> {
    adaptive_avg_pool_backward(grad, e_t_shape)
}

/// `(B, D, H, W)` to `(B*G, D/G, H, W)`; a pure reshape in row-major order.
pub fn regroup<T: Scalar>(x: Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    let [b, d, h, w] = x.shape();
    if groups == 0 || d % groups != 0 {
        return Err(Error::shape(format!("depth {d} not divisible into {groups} groups")));
    }
    x.reshape([b * groups, d / groups, h, w])
}

pub fn ungroup<T: Scalar>(x: Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    let [bg, c, h, w] = x.shape();
    if groups == 0 || bg % groups != 0 {
        return Err(Error::shape(format!("batch {bg} not divisible into {groups} groups")));
    }
    x.reshape([bg / groups, c * groups, h, w])
}

#[derive(Debug, Clone)]
pub struct GateCache<T> {
    input: Tensor4<T>,
    gate_h: Tensor4<T>,
    gate_w: Tensor4<T>,
    norm: NormCache<T>,
}

/// `GN(F * sigmoid(pool_width(F)) * sigmoid(pool_height(F)))`.
pub fn directional_gate<T: Scalar>(f: &Tensor4<T>, affine: &NormAffine<T>) -> Result<(Tensor4<T>, GateCache<T>)> {
    let [_, c, h, w] = f.shape();
    let gate_h = adaptive_avg_pool(f, h, 1)?.map(sigmoid);
    let gate_w = adaptive_avg_pool(f, 1, w)?.map(sigmoid);
    let mut gated = f.clone();
    for ((plane, gh), gw) in gated
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(gate_h.data().chunks_exact(h))
        .zip(gate_w.data().chunks_exact(w))
    {
        for (row, &gh) in plane.chunks_exact_mut(w).zip(gh) {
            for (v, &g) in row.iter_mut().zip(gw) {
                *v *= gh * g;
            }
        }
    }
    let (out, norm) = groupnorm_forward(&gated, affine, c, T::lit(NORM_EPS))?;
    Ok((
        out,
        GateCache {
            input: f.clone(),
            gate_h,
            gate_w,
            norm,
        },
    ))
}

pub fn directional_gate_backward<T: Scalar>(
    cache: &GateCache<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, NormAffine<T>)> {
    let g = norm_backward(&cache.norm, grad_out)?;
    let grad_gated = g.input;
    let f = &cache.input;
    let [_, _, h, w] = f.shape();
    let mut grad_f = Tensor4::zeros(f.shape());
    let mut grad_ph = Tensor4::zeros(cache.gate_h.shape());
    let mut grad_pw = Tensor4::zeros(cache.gate_w.shape());
    let planes = f
        .data()
        .chunks_exact(h * w)
        .zip(grad_gated.data().chunks_exact(h * w))
        .zip(grad_f.data_mut().chunks_exact_mut(h * w));
    let gates = cache
        .gate_h
        .data()
        .chunks_exact(h)
        .zip(cache.gate_w.data().chunks_exact(w))
        .zip(grad_ph.data_mut().chunks_exact_mut(h).zip(grad_pw.data_mut().chunks_exact_mut(w)));
    for (((x, up), gf), ((gh, gw), (gph, gpw))) in planes.zip(gates) {
        for hh in 0..h {
            let (x, up) = (&x[hh * w..][..w], &up[hh * w..][..w]);
            let mut acc_h = T::zero();
            for j in 0..w {
                let gx = up[j] * x[j];
                acc_h += gx * gw[j];
                gpw[j] += gx * gh[hh];
                gf[hh * w + j] = up[j] * gh[hh] * gw[j];
            }
            gph[hh] = acc_h;
        }
    }
    // Through the sigmoids and back through the pools.
    let grad_ph = grad_ph.zip_map(&cache.gate_h, |g, s| g * s * (T::one() - s))?;
    let grad_pw = grad_pw.zip_map(&cache.gate_w, |g, s| g * s * (T::one() - s))?;
    grad_f.add_assign(&adaptive_avg_pool_backward(&grad_ph, f.shape())?)?;
    grad_f.add_assign(&adaptive_avg_pool_backward(&grad_pw, f.shape())?)?;
    Ok((grad_f, g.affine))
}

/// Softmax attention over the depths of `own` (after global pooling),
/// applied to the flattened features of `other`: `(N,c,.,.) -> (N,1,1,H*W)`.
#[derive(Debug, Clone)]
struct AttendCache<T> {
    own_shape: [usize; 4],
    softmax: ActivationCache<T>,
    weights: Tensor4<T>,
    other_flat: Tensor4<T>,
}

fn attend<T: Scalar>(own: &Tensor4<T>, other: &Tensor4<T>) -> Result<(Tensor4<T>, AttendCache<T>)> {
    let [n, c, _, _] = own.shape();
    let [_, _, oh, ow] = other.shape();
    let pooled = adaptive_avg_pool(own, 1, 1)?;
    let (attn, softmax) = activation_forward(&pooled, Activation::Softmax(Axis::Depth));
    let weights = attn.reshape([n, 1, 1, c])?;
    let other_flat = other.clone().reshape([n, 1, c, oh * ow])?;
    let out = matmul_batched(&weights, &other_flat)?;
    Ok((
        out,
        AttendCache {
            own_shape: own.shape(),
            softmax,
            weights,
            other_flat,
        },
    ))
}

/// Returns `(grad_own, grad_other_flat)`.
fn attend_backward<T: Scalar>(cache: &AttendCache<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, c, _, _] = cache.own_shape;
    let (g_weights, g_other) = matmul_batched_backward(&cache.weights, &cache.other_flat, grad_out)?;
    let g_attn = g_weights.reshape([n, c, 1, 1])?;
    let g_pooled = activation_backward(&cache.softmax, &g_attn)?;
    let g_own = adaptive_avg_pool_backward(&g_pooled, cache.own_shape)?;
    Ok((g_own, g_other))
}

#[derive(Debug, Clone)]
pub struct CnaCache<T> {
    groups: usize,
    f_s: Tensor4<T>,
    gate_t: GateCache<T>,
    gate_s: GateCache<T>,
    attend_1: AttendCache<T>,
    attend_2: AttendCache<T>,
    fuse: ConvCache<T>,
    weight_gate: Tensor4<T>,
}

pub struct CnaOutput<T> {
    pub e: Tensor4<T>,
    pub f_t: Tensor4<T>,
    pub f_s: Tensor4<T>,
    pub f_1: Tensor4<T>,
    pub f_2: Tensor4<T>,
    pub w: Tensor4<T>,
    pub cache: CnaCache<T>,
}

/// `E_t': (B,D,D,T')`, `E_s': (B,D,1,T')` to `E: (B,D,1,T')`.
pub fn cna_forward<T: Scalar>(
    e_t_prime: &Tensor4<T>,
    e_s_prime: &Tensor4<T>,
    params: &ListenNetParams<T>,
    config: &ModelConfig,
) -> Result<CnaOutput<T>> {
    let g = config.groups;
    let d = config.d_depth;
    let f_t = regroup(e_t_prime.clone(), g)?;
    let f_s = regroup(e_s_prime.clone(), g)?;
    let [bg, c, _, t] = f_s.shape();
    if f_t.shape() != [bg, c, d, t] {
        return Err(Error::shape(format!(
            "cna: grouped E_t' {:?} incompatible with grouped E_s' {:?}",
            f_t.shape(),
            f_s.shape()
        )));
    }

    let (f_1, gate_t) = directional_gate(&f_t, &params.cna_norm_t)?;
    let (f_2, gate_s) = directional_gate(&f_s, &params.cna_norm_s)?;

    // M1 attends F_2 with F_1's weights; M2 attends F_1 with F_2's weights.
    let (m_1, attend_1) = attend(&f_1, &f_2)?;
    let (m_2, attend_2) = attend(&f_2, &f_1)?;
    let m_1 = m_1.reshape([bg, 1, 1, t])?;
    let m_2 = m_2.reshape([bg, d, 1, t])?;
    let fused_in = concat_depth(&[&m_1, &m_2])?;
    let (w, fuse) = conv2d_forward(&fused_in, &config.cna_fuse(), &params.cna_fuse)?;
    let weight_gate = w.map(sigmoid);

    let mut e = f_s.clone();
    for s in 0..bg {
        let wg = weight_gate.row(s, 0, 0).to_vec();
        for ch in 0..c {
            for (v, &gv) in e.row_mut(s, ch, 0).iter_mut().zip(&wg) {
                *v *= gv;
            }
        }
    }
    let e = ungroup(e, g)?;
    Ok(CnaOutput {
        e,
        f_t,
        f_s: f_s.clone(),
        f_1,
        f_2,
        w,
        cache: CnaCache {
            groups: g,
            f_s,
            gate_t,
            gate_s,
            attend_1,
            attend_2,
            fuse,
            weight_gate,
        },
    })
}

/// Returns `(grad_e_t_prime, grad_e_s_prime)`.
pub fn cna_backward<T: Scalar>(
    cache: &CnaCache<T>,
    grad_e: Tensor4<T>,
    grads: &mut ParamGrads<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let g = cache.groups;
    let grad_e = regroup(grad_e, g)?;
    let [bg, c, _, t] = cache.f_s.shape();

    let mut grad_f_s = Tensor4::zeros(cache.f_s.shape());
    let mut grad_w = Tensor4::zeros([bg, 1, 1, t]);
    for s in 0..bg {
        let wg = cache.weight_gate.row(s, 0, 0);
        for ch in 0..c {
            let up = grad_e.row(s, ch, 0);
            let fs = cache.f_s.row(s, ch, 0);
            for j in 0..t {
                grad_f_s.row_mut(s, ch, 0)[j] = up[j] * wg[j];
                grad_w.row_mut(s, 0, 0)[j] += up[j] * fs[j];
            }
        }
    }
    let grad_w = grad_w.zip_map(&cache.weight_gate, |gv, sv| gv * sv * (T::one() - sv))?;
    let fuse = conv2d_backward(&cache.fuse, &grad_w)?;
    grads.cna_fuse = fuse.params;
    let d = fuse.input.shape()[1] - 1;
    let parts = split_depth(&fuse.input, &[1, d])?;
    let grad_m_1 = parts[0].clone().reshape([bg, 1, 1, t])?;
    let grad_m_2 = parts[1].clone().reshape([bg, 1, 1, d * t])?;

    let (grad_f_1_own, grad_f_2_flat) = attend_backward(&cache.attend_1, &grad_m_1)?;
    let (grad_f_2_own, grad_f_1_flat) = attend_backward(&cache.attend_2, &grad_m_2)?;

    let mut grad_f_1 = grad_f_1_own;
    grad_f_1.add_assign(&grad_f_1_flat.reshape([bg, c, d, t])?)?;
    let mut grad_f_2 = grad_f_2_own;
    grad_f_2.add_assign(&grad_f_2_flat.reshape([bg, c, 1, t])?)?;

    let (grad_f_t, affine_t) = directional_gate_backward(&cache.gate_t, &grad_f_1)?;
    let (grad_f_s_gate, affine_s) = directional_gate_backward(&cache.gate_s, &grad_f_2)?;
    grads.cna_norm_t = affine_t;
    grads.cna_norm_s = affine_s;
    grad_f_s.add_assign(&grad_f_s_gate)?;

    Ok((ungroup(grad_f_t, g)?, ungroup(grad_f_s, g)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_align_pools_rows() {
        let x = Tensor4::from_vec([1, 1, 64, 1], (0..64).map(|v| v as f64).collect()).unwrap();
        let y = depth_align(&x, 16).unwrap();
        assert_eq!(y.shape(), [1, 1, 16, 1]);
        for i in 0..16 {
            let expected = (4 * i..4 * i + 4).map(|v| v as f64).sum::<f64>() / 4.0;
            assert_eq!(y.at(0, 0, i, 0), expected);
        }
        let c = Tensor4::new([2, 3, 20, 5], 1.5f64).unwrap();
        assert!(depth_align(&c, 16).unwrap().data().iter().all(|&v| v == 1.5));
        let same = Tensor4::from_vec([1, 1, 16, 2], (0..32).map(|v| v as f64).collect()).unwrap();
        assert_eq!(depth_align(&same, 16).unwrap(), same);
        assert!(depth_align(&Tensor4::<f64>::zeros([1, 1, 8, 2]), 16).is_err());
    }

    #[test]
    fn uniform_attention_averages_rows() {
        // Equal pooled values give a = [0.5, 0.5], so the attended map is
        // the mean of the other branch's two rows.
        let own = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        let other = Tensor4::from_vec([1, 2, 1, 3], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        let (m, cache) = attend(&own, &other).unwrap();
        assert_eq!(cache.weights.data(), &[0.5, 0.5]);
        assert_eq!(m.data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn regroup_round_trips() {
        let x = Tensor4::from_vec([2, 4, 1, 3], (0..24).map(|v| v as f64).collect()).unwrap();
        let g = regroup(x.clone(), 2).unwrap();
        assert_eq!(g.shape(), [4, 2, 1, 3]);
        // Sample 1, depths 2..4 become grouped sample 3.
        assert_eq!(g.row(3, 0, 0), x.row(1, 2, 0));
        assert_eq!(ungroup(g, 2).unwrap(), x);
        assert!(regroup(x, 3).is_err());
    }
}
