//! Independent oracles: a naive double-precision convolution, central
//! finite differences against the hand-written backward passes, and a
//! direct recomputation of the alignment whitening property.
//!
//! Nothing here reuses the optimized kernels it checks, except to call
//! them as the code under test.

mod battery;

use log::warn;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{ConvParams, ConvSpec};
use crate::preprocess::{AlignmentMatrix, DecisionWindow};
use crate::tensor::{Scalar, Tensor4};

pub use battery::{run_battery, toy_config, BatteryOptions, LAYER_GATE, MODEL_GATE};

pub const DEFAULT_EPS: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

/// Direct loop-nest evaluation of a grouped, dilated, valid convolution in
/// `f64`.
pub fn naive_conv<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor4<f64>> {
    let [b, d, h, w] = x.shape();
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let g = spec.groups;
    if g == 0 || d != spec.in_depth || d % g != 0 || spec.out_depth % g != 0 {
        return Err(Error::shape(format!("naive_conv: input {:?} vs {spec:?}", x.shape())));
    }
    let cin = d / g;
    let cout = spec.out_depth / g;
    if params.weight.shape() != [spec.out_depth, cin, kh, kw] {
        return Err(Error::shape("naive_conv: weight shape"));
    }
    let reach_h = (kh - 1) * dh + 1;
    let reach_w = (kw - 1) * dw + 1;
    if reach_h > h || reach_w > w {
        return Err(Error::shape(format!("naive_conv: kernel reach exceeds input {:?}", x.shape())));
    }
    let (ho, wo) = (h - reach_h + 1, w - reach_w + 1);
    let mut out = vec![0.0f64; b * spec.out_depth * ho * wo];
    for n in 0..b {
        for o in 0..spec.out_depth {
            let group = o / cout;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = params.bias.as_ref().map_or(0.0, |bv| bv[o].as_f64());
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let xi = x.data()[((n * d + group * cin + c) * h + i + u * dh) * w + j + v * dw];
                                let wi = params.weight.data()[((o * cin + c) * kh + u) * kw + v];
                                acc += xi.as_f64() * wi.as_f64();
                            }
                        }
                    }
                    out[((n * spec.out_depth + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor4::from_vec([b, spec.out_depth, ho, wo], out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub gate: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failed(name: &str, gate: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            checked: 0,
            gate,
            pass: false,
        }
    }
}

/// Compares `analytic[i]` with the central difference of `f` at `theta`
/// for every `i` in `indices`.
pub fn finite_diff_grad(
    name: &str,
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    gate: f64,
) -> GradCheckReport {
    if theta.len() != analytic.len() || indices.iter().any(|&i| i >= theta.len()) {
        warn!("{name}: gradient length mismatch");
        return GradCheckReport::failed(name, gate);
    }
    let mut probe = theta.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for &i in indices {
        probe[i] = theta[i] + eps;
        let up = f(&probe);
        probe[i] = theta[i] - eps;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            warn!("{name}: non-finite value at parameter {i}");
            return GradCheckReport {
                checked: indices.len(),
                ..GradCheckReport::failed(name, gate)
            };
        }
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked: indices.len(),
        gate,
        pass: max_rel < gate,
    }
}

/// `k` distinct indices below `n` (all of them when `n <= k`), sorted.
pub fn sample_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Applies `alignment` to each window in `f64` and returns the Frobenius
/// distance between the mean per-window covariance and the identity.
pub fn check_alignment(windows: &[DecisionWindow], alignment: &AlignmentMatrix) -> f64 {
    let Some(first) = windows.first() else {
        return 0.0;
    };
    let c = first.channels;
    let m = &alignment.matrix;
    let mut mean = vec![0.0f64; c * c];
    for w in windows {
        let t = w.len;
        let mut y = vec![0.0f64; c * t];
        for i in 0..c {
            for k in 0..c {
                for s in 0..t {
                    y[i * t + s] += m[(i, k)] * w.data[k * t + s] as f64;
                }
            }
        }
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = (0..t).map(|s| y[i * t + s] * y[j * t + s]).sum();
                mean[i * c + j] += dot / t as f64 / windows.len() as f64;
            }
        }
    }
    let mut dev = 0.0;
    for i in 0..c {
        for j in 0..c {
            let target = if i == j { 1.0 } else { 0.0 };
            dev += (mean[i * c + j] - target).powi(2);
        }
    }
    dev.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::conv2d_forward;
    use crate::preprocess::{compute_alignment, Label};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn naive_conv_examples() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let spec = ConvSpec {
            bias: false,
            ..ConvSpec::depthwise(1, (1, 2))
        };
        let params = ConvParams {
            weight: Tensor4::new([1, 1, 1, 2], 1.0f32).unwrap(),
            bias: None,
        };
        assert_eq!(naive_conv(&x, &spec, &params).unwrap().data(), &[3.0, 5.0, 7.0]);

        let spec = ConvSpec {
            bias: false,
            ..ConvSpec::pointwise(1, 1)
        };
        let params = ConvParams {
            weight: Tensor4::new([1, 1, 1, 1], 1.0f32).unwrap(),
            bias: None,
        };
        assert_eq!(naive_conv(&x, &spec, &params).unwrap(), x.cast::<f64>());
    }

    #[test]
    fn naive_and_optimized_conv_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let spec = ConvSpec::dilated(3, 2, rng.random_range(1..4), rng.random_range(1..3));
            let mut params = ConvParams::<f32>::zeros(&spec);
            for v in params.weight.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let x = Tensor4::from_vec([2, 3, 2, 9], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (y, _) = conv2d_forward(&x, &spec, &params).unwrap();
            let r = naive_conv(&x, &spec, &params).unwrap();
            assert!(y.cast::<f64>().max_abs_diff(&r) < 1e-5);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_grad("sq", |t| t[0] * t[0], &[3.0], &[6.0], &[0], DEFAULT_EPS, 1e-4);
        assert!(r.pass && r.max_abs_err < 1e-8);
        let bad = finite_diff_grad("sq", |t| t[0] * t[0], &[3.0], &[6.5], &[0], DEFAULT_EPS, 1e-4);
        assert!(!bad.pass);
        let nan = finite_diff_grad("nan", |_| f64::NAN, &[3.0], &[6.0], &[0], DEFAULT_EPS, 1e-4);
        assert!(!nan.pass);
    }

    #[test]
    fn alignment_check_controls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let windows: Vec<DecisionWindow> = (0..5)
            .map(|_| {
                let base: Vec<f32> = (0..3 * 50).map(|_| rng.random_range(-1.0..1.0)).collect();
                // Channel 1 copies channel 0 with noise: strongly correlated.
                let mut data = base.clone();
                for s in 0..50 {
                    data[50 + s] = base[s] + 0.1 * base[50 + s];
                }
                DecisionWindow {
                    data,
                    channels: 3,
                    len: 50,
                    label: Label::Left,
                    subject_id: "s".into(),
                    trial_id: "t".into(),
                    start_sample: 0,
                }
            })
            .collect();
        let refs: Vec<&DecisionWindow> = windows.iter().collect();
        let m = compute_alignment("s", &refs).unwrap();
        assert!(check_alignment(&windows, &m) < 1e-6);
        assert!(check_alignment(&windows, &AlignmentMatrix::identity("s", 3)) > 0.1);
    }
}
