use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::Result;
use crate::layers::{ConvParams, ConvSpec, LinearParams, NormAffine};
use crate::tensor::{Scalar, Tensor4};

/// Every trainable tensor of the network. Also used as the gradient
/// container (`ParamGrads`), since gradients mirror parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ListenNetParams<T> {
    pub temporal_pointwise: ConvParams<T>,
    pub temporal_depthwise: ConvParams<T>,
    pub spatial_pointwise: ConvParams<T>,
    pub spatial_depthwise: ConvParams<T>,
    pub mste_branches: Vec<ConvParams<T>>,
    pub mste_norm: NormAffine<T>,
    pub mste_skip: ConvParams<T>,
    pub cna_norm_t: NormAffine<T>,
    pub cna_norm_s: NormAffine<T>,
    pub cna_fuse: ConvParams<T>,
    pub classifier: LinearParams<T>,
}

pub type ParamGrads<T> = ListenNetParams<T>;

/// Whether a named tensor is drawn from the fan-in uniform at init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

impl<T: Scalar> ListenNetParams<T> {
    /// Correctly shaped parameters with all-zero weights, biases and
    /// affines (the gradient accumulator).
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.group_depth();
        Self {
            temporal_pointwise: ConvParams::zeros(&config.temporal_pointwise()),
            temporal_depthwise: ConvParams::zeros(&config.temporal_depthwise()),
            spatial_pointwise: ConvParams::zeros(&config.spatial_pointwise()),
            spatial_depthwise: ConvParams::zeros(&config.spatial_depthwise()),
            mste_branches: config
                .mste_kernels
                .iter()
                .map(|&k| ConvParams::zeros(&config.mste_branch(k)))
                .collect(),
            mste_norm: NormAffine::zeros(config.d_depth),
            mste_skip: ConvParams::zeros(&config.mste_skip()),
            cna_norm_t: NormAffine::zeros(c),
            cna_norm_s: NormAffine::zeros(c),
            cna_fuse: ConvParams::zeros(&config.cna_fuse()),
            classifier: LinearParams::zeros(config.d_depth, config.num_classes),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ListenNetParams<U> {
        let mut out = ListenNetParams::<U>::zeros_like_shapes(self);
        for ((_, _, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }

    fn zeros_like_shapes<S: Scalar>(other: &ListenNetParams<S>) -> Self {
        let conv = |p: &ConvParams<S>| ConvParams {
            weight: Tensor4::zeros(p.weight.shape()),
            bias: p.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
        };
        Self {
            temporal_pointwise: conv(&other.temporal_pointwise),
            temporal_depthwise: conv(&other.temporal_depthwise),
            spatial_pointwise: conv(&other.spatial_pointwise),
            spatial_depthwise: conv(&other.spatial_depthwise),
            mste_branches: other.mste_branches.iter().map(conv).collect(),
            mste_norm: NormAffine::zeros(other.mste_norm.depth()),
            mste_skip: conv(&other.mste_skip),
            cna_norm_t: NormAffine::zeros(other.cna_norm_t.depth()),
            cna_norm_s: NormAffine::zeros(other.cna_norm_s.depth()),
            cna_fuse: conv(&other.cna_fuse),
            classifier: LinearParams {
                weight: Tensor4::zeros(other.classifier.weight.shape()),
                bias: vec![T::zero(); other.classifier.bias.len()],
            },
        }
    }

    /// All tensors in a fixed order with their names and roles.
    pub fn tensors(&self) -> Vec<(String, ParamRole, &[T])> {
        let mut out = Vec::new();
        fn conv<'a, T: Scalar>(name: &str, p: &'a ConvParams<T>, out: &mut Vec<(String, ParamRole, &'a [T])>) {
            let [_, i, kh, kw] = p.weight.shape();
            out.push((format!("{name}.weight"), ParamRole::Weight { fan_in: i * kh * kw }, p.weight.data()));
            if let Some(b) = &p.bias {
                out.push((format!("{name}.bias"), ParamRole::Bias, b.as_slice()));
            }
        }
        conv("stde_t.pointwise", &self.temporal_pointwise, &mut out);
        conv("stde_t.depthwise", &self.temporal_depthwise, &mut out);
        conv("stde_s.pointwise", &self.spatial_pointwise, &mut out);
        conv("stde_s.depthwise", &self.spatial_depthwise, &mut out);
        for (i, b) in self.mste_branches.iter().enumerate() {
            conv(&format!("mste.branch{i}"), b, &mut out);
        }
        out.push(("mste.norm.gamma".into(), ParamRole::Gamma, &self.mste_norm.gamma));
        out.push(("mste.norm.beta".into(), ParamRole::Beta, &self.mste_norm.beta));
        conv("mste.skip", &self.mste_skip, &mut out);
        out.push(("cna.norm_t.gamma".into(), ParamRole::Gamma, &self.cna_norm_t.gamma));
        out.push(("cna.norm_t.beta".into(), ParamRole::Beta, &self.cna_norm_t.beta));
        out.push(("cna.norm_s.gamma".into(), ParamRole::Gamma, &self.cna_norm_s.gamma));
        out.push(("cna.norm_s.beta".into(), ParamRole::Beta, &self.cna_norm_s.beta));
        conv("cna.fuse", &self.cna_fuse, &mut out);
        let n_in = self.classifier.in_features();
        out.push((
            "classifier.weight".into(),
            ParamRole::Weight { fan_in: n_in },
            self.classifier.weight.data(),
        ));
        out.push(("classifier.bias".into(), ParamRole::Bias, &self.classifier.bias));
        out
    }

    /// Mutable view of [`ListenNetParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ParamRole, &mut [T])> {
        let mut out = Vec::new();
        fn conv<'a, T: Scalar>(name: &str, p: &'a mut ConvParams<T>, out: &mut Vec<(String, ParamRole, &'a mut [T])>) {
            let [_, i, kh, kw] = p.weight.shape();
            out.push((format!("{name}.weight"), ParamRole::Weight { fan_in: i * kh * kw }, p.weight.data_mut()));
            if let Some(b) = p.bias.as_mut() {
                out.push((format!("{name}.bias"), ParamRole::Bias, b.as_mut_slice()));
            }
        }
        conv("stde_t.pointwise", &mut self.temporal_pointwise, &mut out);
        conv("stde_t.depthwise", &mut self.temporal_depthwise, &mut out);
        conv("stde_s.pointwise", &mut self.spatial_pointwise, &mut out);
        conv("stde_s.depthwise", &mut self.spatial_depthwise, &mut out);
        for (i, b) in self.mste_branches.iter_mut().enumerate() {
            conv(&format!("mste.branch{i}"), b, &mut out);
        }
        out.push(("mste.norm.gamma".into(), ParamRole::Gamma, &mut self.mste_norm.gamma));
        out.push(("mste.norm.beta".into(), ParamRole::Beta, &mut self.mste_norm.beta));
        conv("mste.skip", &mut self.mste_skip, &mut out);
        out.push(("cna.norm_t.gamma".into(), ParamRole::Gamma, &mut self.cna_norm_t.gamma));
        out.push(("cna.norm_t.beta".into(), ParamRole::Beta, &mut self.cna_norm_t.beta));
        out.push(("cna.norm_s.gamma".into(), ParamRole::Gamma, &mut self.cna_norm_s.gamma));
        out.push(("cna.norm_s.beta".into(), ParamRole::Beta, &mut self.cna_norm_s.beta));
        conv("cna.fuse", &mut self.cna_fuse, &mut out);
        let n_in = self.classifier.in_features();
        out.push((
            "classifier.weight".into(),
            ParamRole::Weight { fan_in: n_in },
            self.classifier.weight.data_mut(),
        ));
        out.push(("classifier.bias".into(), ParamRole::Bias, &mut self.classifier.bias));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| *v == T::zero()))
    }
}

/// Uniform `+-sqrt(6 / fan_in)` weights, zero biases, unit gammas, zero
/// betas. Deterministic in `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ListenNetParams<T>> {
    config.validate()?;
    let mut params = ListenNetParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, role, values) in params.tensors_mut() {
        match role {
            ParamRole::Weight { fan_in } => {
                let bound = init_bound(fan_in);
                for v in values.iter_mut() {
                    *v = T::lit(rng.random_range(-bound..=bound));
                }
            }
            ParamRole::Gamma => values.fill(T::one()),
            ParamRole::Bias | ParamRole::Beta => values.fill(T::zero()),
        }
    }
    Ok(params)
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Closed-form trainable scalar count.
pub fn count_params(config: &ModelConfig) -> usize {
    let conv = |s: ConvSpec| s.param_count();
    let d = config.d_depth;
    let c = config.group_depth();
    conv(config.temporal_pointwise())
        + conv(config.temporal_depthwise())
        + conv(config.spatial_pointwise())
        + conv(config.spatial_depthwise())
        + config
            .mste_kernels
            .iter()
            .map(|&k| conv(config.mste_branch(k)))
            .sum::<usize>()
        + 2 * d
        + conv(config.mste_skip())
        + 2 * 2 * c
        + conv(config.cna_fuse())
        + d * config.num_classes
        + config.num_classes
}
