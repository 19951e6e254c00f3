//! Grouped, dilated, valid (unpadded) stride-1 convolution.
//!
//! One kernel covers every convolution role in the network: pointwise 1x1,
//! depthwise temporal `(1, k)`, depthwise spatial `(C, 1)` and dilated
//! temporal `(1, k)` with dilation `(1, d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_depth: usize,
    pub out_depth: usize,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(in_depth: usize, out_depth: usize) -> Self {
        Self {
            in_depth,
            out_depth,
            kernel: (1, 1),
            dilation: (1, 1),
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(depth: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_depth: depth,
            out_depth: depth,
            kernel,
            dilation: (1, 1),
            groups: depth,
            bias: true,
        }
    }

    pub fn dilated(in_depth: usize, out_depth: usize, k: usize, dilation: usize) -> Self {
        Self {
            in_depth,
            out_depth,
            kernel: (1, k),
            dilation: (1, dilation),
            groups: 1,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (dh, dw) = self.dilation;
        if self.groups == 0 || kh == 0 || kw == 0 || dh == 0 || dw == 0 {
            return Err(Error::shape(format!("degenerate conv spec {self:?}")));
        }
        if self.in_depth % self.groups != 0 || self.out_depth % self.groups != 0 {
            return Err(Error::shape(format!(
                "depths {}->{} not divisible by groups {}",
                self.in_depth, self.out_depth, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_depth,
            self.in_depth / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Input scalars feeding one output element.
    pub fn fan_in(&self) -> usize {
        self.in_depth / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        let [o, i, kh, kw] = self.weight_shape();
        o * i * kh * kw + if self.bias { self.out_depth } else { 0 }
    }

    /// Effective (dilated) kernel extents.
    pub fn span(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation.0 + 1,
            (self.kernel.1 - 1) * self.dilation.1 + 1,
        )
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.span();
        if sh > h || sw > w {
            return Err(Error::shape(format!(
                "effective kernel {sh}x{sw} exceeds input {h}x{w}"
            )));
        }
        Ok((h - sh + 1, w - sw + 1))
    }

    /// Multiply-accumulates for one sample of spatial size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.output_hw(h, w)?;
        Ok((self.out_depth * ho * wo * self.fan_in()) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weight: Tensor4::zeros(spec.weight_shape()),
            bias: spec.bias.then(|| vec![T::zero(); spec.out_depth]),
        }
    }

    fn check(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        self.weight.expect_shape(spec.weight_shape(), "conv weight")?;
        match (&self.bias, spec.bias) {
            (Some(b), true) if b.len() == spec.out_depth => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::shape("conv bias does not match spec")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    spec: ConvSpec,
    input: Tensor4<T>,
    weight: Tensor4<T>,
    out_shape: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub params: ConvParams<T>,
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    spec: &ConvSpec,
    params: &ConvParams<T>,
) -> Result<(Tensor4<T>, ConvCache<T>)> {
    params.check(spec)?;
    let [b, d, h, w] = x.shape();
    if d != spec.in_depth {
        return Err(Error::shape(format!(
            "conv input depth {d} != spec in_depth {}",
            spec.in_depth
        )));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let in_per_group = spec.in_depth / spec.groups;
    let out_per_group = spec.out_depth / spec.groups;

    // Outputs are accumulated at the input row stride, so every tap is one
    // contiguous run; the trailing `w - wo` columns of each row are dropped.
    let run = (ho - 1) * w + wo;
    let mut buf = vec![T::zero(); run];
    let (in_plane, out_plane) = (h * w, ho * wo);
    let mut od = Vec::with_capacity(b * spec.out_depth * out_plane);
    let xd = x.data();
    for bi in 0..b {
        for o in 0..spec.out_depth {
            let base = (o / out_per_group) * in_per_group;
            buf.fill(params.bias.as_ref().map_or(T::zero(), |bv| bv[o]));
            for c in 0..in_per_group {
                let src = &xd[(bi * d + base + c) * in_plane..][..in_plane];
                for u in 0..kh {
                    for v in 0..kw {
                        axpy(&mut buf, params.weight.at(o, c, u, v), &src[u * dh * w + v * dw..][..run]);
                    }
                }
            }
            for row in buf.chunks(w) {
                od.extend_from_slice(&row[..wo]);
            }
        }
    }
    let out = Tensor4::from_vec([b, spec.out_depth, ho, wo], od)?;
    let out_shape = out.shape();
    Ok((
        out,
        ConvCache {
            spec: *spec,
            input: x.clone(),
            weight: params.weight.clone(),
            out_shape,
        },
    ))
}

pub fn conv2d_backward<T: Scalar>(cache: &ConvCache<T>, grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
    grad_out.expect_shape(cache.out_shape, "conv2d_backward grad_out")?;
    let spec = &cache.spec;
    let x = &cache.input;
    let [b, d, h, w] = x.shape();
    let [_, _, ho, wo] = cache.out_shape;
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let in_per_group = spec.in_depth / spec.groups;
    let out_per_group = spec.out_depth / spec.groups;

    let mut gx = Tensor4::zeros(x.shape());
    let mut gw = Tensor4::zeros(spec.weight_shape());
    let mut gb = spec.bias.then(|| vec![T::zero(); spec.out_depth]);

    let (in_plane, out_plane) = (h * w, ho * wo);
    // Output gradients spread to the input row stride with zero padding, as
    // in the forward pass.
    let run = (ho - 1) * w + wo;
    let mut padded = vec![T::zero(); run];
    let xd = x.data();
    let gd = grad_out.data();
    for bi in 0..b {
        for o in 0..spec.out_depth {
            let base = (o / out_per_group) * in_per_group;
            let g = &gd[(bi * spec.out_depth + o) * out_plane..][..out_plane];
            if let Some(gb) = gb.as_mut() {
                gb[o] += g.iter().copied().sum::<T>();
            }
            if wo == w {
                padded.copy_from_slice(g);
            } else {
                for (dst, src) in padded.chunks_mut(w).zip(g.chunks_exact(wo)) {
                    dst[..wo].copy_from_slice(src);
                }
            }
            for c in 0..in_per_group {
                let plane = (bi * d + base + c) * in_plane;
                let src = &xd[plane..][..in_plane];
                let gxp = &mut gx.data_mut()[plane..][..in_plane];
                for u in 0..kh {
                    for v in 0..kw {
                        let at = u * dh * w + v * dw;
                        *gw.at_mut(o, c, u, v) += dot(&padded, &src[at..][..run]);
                        axpy(&mut gxp[at..][..run], cache.weight.at(o, c, u, v), &padded);
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        params: ConvParams {
            weight: gw,
            bias: gb,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn no_bias(mut spec: ConvSpec) -> ConvSpec {
        spec.bias = false;
        spec
    }

    #[test]
    fn depthwise_pair_sum() {
        let spec = no_bias(ConvSpec::depthwise(1, (1, 2)));
        let p = ConvParams {
            weight: Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap(),
            bias: None,
        };
        let (y, _) = conv2d_forward(&row(&[1.0, 2.0, 3.0, 4.0]), &spec, &p).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let spec = no_bias(ConvSpec::pointwise(3, 3));
        let mut p = ConvParams::<f64>::zeros(&spec);
        for o in 0..3 {
            *p.weight.at_mut(o, o, 0, 0) = 1.0;
        }
        let x = Tensor4::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        let (y, _) = conv2d_forward(&x, &spec, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_single_placement() {
        let spec = no_bias(ConvSpec::dilated(1, 1, 3, 2));
        let p = ConvParams {
            weight: Tensor4::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap(),
            bias: None,
        };
        let (y, _) = conv2d_forward(&row(&[1.0, 0.0, 0.0, 0.0, 1.0]), &spec, &p).unwrap();
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::depthwise(1, (1, 6));
        let p = ConvParams::<f64>::zeros(&spec);
        assert!(matches!(
            conv2d_forward(&row(&[1.0; 5]), &spec, &p),
            Err(Error::Shape(_))
        ));
        let bad_groups = ConvSpec {
            groups: 2,
            ..ConvSpec::pointwise(3, 4)
        };
        assert!(bad_groups.validate().is_err());
        let wrong_depth = ConvSpec::pointwise(2, 1);
        let p = ConvParams::<f64>::zeros(&wrong_depth);
        assert!(conv2d_forward(&row(&[1.0]), &wrong_depth, &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = ConvSpec::dilated(2, 3, 2, 1);
        let mut p = ConvParams::<f64>::zeros(&spec);
        p.weight.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let x = Tensor4::new([2, 2, 1, 5], 1.25).unwrap();
        let (y, cache) = conv2d_forward(&x, &spec, &p).unwrap();
        let g = conv2d_backward(&cache, &Tensor4::zeros(y.shape())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.params.bias.unwrap().iter().all(|&v| v == 0.0));
        assert!(conv2d_backward(&cache, &Tensor4::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn scalar_kernel_weight_grad_is_correlation() {
        let spec = no_bias(ConvSpec::pointwise(1, 1));
        let p = ConvParams {
            weight: Tensor4::from_vec([1, 1, 1, 1], vec![0.7]).unwrap(),
            bias: None,
        };
        let x = Tensor4::from_vec([2, 1, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let g = Tensor4::from_vec([2, 1, 1, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, -0.25]).unwrap();
        let (_, cache) = conv2d_forward(&x, &spec, &p).unwrap();
        let grads = conv2d_backward(&cache, &g).unwrap();
        let expected: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.params.weight.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn macs_for_first_pointwise_layer() {
        assert_eq!(ConvSpec::pointwise(1, 16).macs(64, 128).unwrap(), 131_072);
    }
}
