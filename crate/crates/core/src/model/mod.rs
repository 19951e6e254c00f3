//! The full network: encoder, multi-scale enhancement, depth alignment,
//! cross-nested attention and classifier, with a hand-scheduled backward
//! pass.

mod audit;
mod classifier;
pub mod cna;
mod config;
pub mod mste;
mod params;
pub mod stde;

use serde::{Deserialize, Serialize};

pub use audit::{count_macs, mac_breakdown, MacBreakdown};
pub use classifier::{classify, classify_backward};
pub use cna::{cna_forward, depth_align};
pub use config::ModelConfig;
pub use mste::mste_forward;
pub use params::{count_params, init_bound, init_params, ListenNetParams, ParamGrads, ParamRole};
pub use stde::stde_forward;

use crate::error::{Error, Result};
use crate::layers::{BatchStats, RunningStats, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor4};

/// Intermediate feature maps of one forward pass, named after the roles
/// they play in the architecture. Ablated blocks leave their maps `None`.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub e_t: Tensor4<T>,
    pub e_s: Tensor4<T>,
    pub u: Option<Tensor4<T>>,
    pub s: Option<Tensor4<T>>,
    pub e_s_prime: Tensor4<T>,
    pub e_t_prime: Option<Tensor4<T>>,
    pub f_t: Option<Tensor4<T>>,
    pub f_s: Option<Tensor4<T>>,
    pub f_1: Option<Tensor4<T>>,
    pub f_2: Option<Tensor4<T>>,
    pub w: Option<Tensor4<T>>,
    pub e: Tensor4<T>,
}

/// Everything [`model_backward`] needs. Consumed by value, so a cache can
/// only be back-propagated once.
#[derive(Debug)]
pub struct ModelCache<T> {
    stde: stde::StdeCache<T>,
    mste: Option<mste::MsteCache<T>>,
    cna: Option<cna::CnaCache<T>>,
    classifier: classifier::ClassifierCache<T>,
    config: ModelConfig,
    activations: Activations<T>,
}

impl<T> ModelCache<T> {
    pub fn activations(&self) -> &Activations<T> {
        &self.activations
    }

    /// Batch-norm statistics observed in a training-mode forward.
    pub fn batch_stats(&self) -> Option<&BatchStats<T>> {
        self.mste.as_ref().and_then(|m| m.norm().batch_stats())
    }
}

/// `batch: (B,1,C,T)` to class probabilities `(B,1,1,2)`.
pub fn model_forward<T: Scalar>(
    batch: &Tensor4<T>,
    params: &ListenNetParams<T>,
    running: &RunningStats<T>,
    config: &ModelConfig,
    training: bool,
) -> Result<(Tensor4<T>, ModelCache<T>)> {
    let [b, _, c, t] = batch.shape();
    let d = config.d_depth;
    let tp = config.t_prime();

    let (e_t, e_s, stde_cache) = stde_forward(batch, params, config)?;
    debug_assert_eq!(e_t.shape(), [b, d, c, tp]);
    debug_assert_eq!(e_s.shape(), [b, d, 1, tp]);
    debug_assert_eq!(t, config.window_len);

    let (e_s_prime, u, s, mste_cache) = if config.use_mste {
        let out = mste_forward(&e_t, &e_s, params, running, config, training)?;
        debug_assert_eq!(out.u.shape(), [b, d, c, config.t_min()]);
        debug_assert_eq!(out.s.shape(), [b, d, 1, tp]);
        (out.e_s_prime, Some(out.u), Some(out.s), Some(out.cache))
    } else {
        (e_s.clone(), None, None, None)
    };

    let mut acts = Activations {
        e_t,
        e_s,
        u,
        s,
        e_s_prime,
        e_t_prime: None,
        f_t: None,
        f_s: None,
        f_1: None,
        f_2: None,
        w: None,
        e: Tensor4::zeros([0, 0, 0, 0]),
    };

    let cna_cache = if config.use_cna {
        let e_t_prime = depth_align(&acts.e_t, d)?;
        debug_assert_eq!(e_t_prime.shape(), [b, d, d, tp]);
        let out = cna_forward(&e_t_prime, &acts.e_s_prime, params, config)?;
        debug_assert_eq!(out.w.shape(), [b * config.groups, 1, 1, tp]);
        debug_assert_eq!(out.e.shape(), [b, d, 1, tp]);
        acts.e_t_prime = Some(e_t_prime);
        acts.f_t = Some(out.f_t);
        acts.f_s = Some(out.f_s);
        acts.f_1 = Some(out.f_1);
        acts.f_2 = Some(out.f_2);
        acts.w = Some(out.w);
        acts.e = out.e;
        Some(out.cache)
    } else {
        acts.e = acts.e_s_prime.clone();
        None
    };

    let (probs, classifier_cache) = classify(&acts.e, params)?;
    debug_assert_eq!(probs.shape(), [b, 1, 1, config.num_classes]);
    Ok((
        probs,
        ModelCache {
            stde: stde_cache,
            mste: mste_cache,
            cna: cna_cache,
            classifier: classifier_cache,
            config: config.clone(),
            activations: acts,
        },
    ))
}

/// Exact gradients of `sum(grad_probs * probs)` for every trainable tensor.
pub fn model_backward<T: Scalar>(cache: ModelCache<T>, grad_probs: &Tensor4<T>) -> Result<ParamGrads<T>> {
    let config = &cache.config;
    let acts = &cache.activations;
    let mut grads = ListenNetParams::zeros(config);
    let expected = [acts.e.shape()[0], 1, 1, config.num_classes];
    if grad_probs.shape() != expected {
        return Err(Error::shape(format!(
            "grad_probs {:?} does not match probs {expected:?}",
            grad_probs.shape()
        )));
    }

    let grad_e = classifier::classify_backward(&cache.classifier, grad_probs, &mut grads)?;
    let (mut grad_e_t, grad_e_s_prime) = match &cache.cna {
        Some(cna_cache) => {
            let (g_et_prime, g_es_prime) = cna::cna_backward(cna_cache, grad_e, &mut grads)?;
            (cna::depth_align_backward(&g_et_prime, acts.e_t.shape())?, g_es_prime)
        }
        None => (Tensor4::zeros(acts.e_t.shape()), grad_e),
    };
    if let Some(mste_cache) = &cache.mste {
        mste::mste_backward(mste_cache, &grad_e_s_prime, &mut grad_e_t, &mut grads)?;
    }
    stde::stde_backward(&cache.stde, grad_e_t, &grad_e_s_prime, &mut grads)?;
    Ok(grads)
}

/// A configured network with its trainable parameters and batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ListenNet<T = f32> {
    pub config: ModelConfig,
    pub params: ListenNetParams<T>,
    pub running: RunningStats<T>,
}

impl<T: Scalar> ListenNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let running = RunningStats::new(config.d_depth);
        Ok(Self {
            config,
            params,
            running,
        })
    }

    pub fn forward(&self, batch: &Tensor4<T>, training: bool) -> Result<(Tensor4<T>, ModelCache<T>)> {
        model_forward(batch, &self.params, &self.running, &self.config, training)
    }

    pub fn backward(&self, cache: ModelCache<T>, grad_probs: &Tensor4<T>) -> Result<ParamGrads<T>> {
        model_backward(cache, grad_probs)
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward(batch, false)?.0)
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        self.running.update(stats, T::lit(BN_MOMENTUM));
    }

    pub fn cast<U: Scalar>(&self) -> ListenNet<U> {
        ListenNet {
            config: self.config.clone(),
            params: self.params.cast(),
            running: RunningStats {
                mean: self.running.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                var: self.running.var.iter().map(|v| U::lit(v.as_f64())).collect(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stde_shapes_for_both_channel_counts() {
        for c in [64, 32] {
            let cfg = ModelConfig::with_input(c, 128);
            let params = init_params::<f64>(&cfg, 0).unwrap();
            let (e_t, e_s, _) = stde_forward(&Tensor4::zeros([2, 1, c, 128]), &params, &cfg).unwrap();
            assert_eq!(e_t.shape(), [2, 16, c, 121]);
            assert_eq!(e_s.shape(), [2, 16, 1, 121]);
            assert!(e_t.data().iter().all(|&v| v == 0.0));
        }
        let cfg = ModelConfig::with_input(64, 128);
        let params = init_params::<f64>(&cfg, 0).unwrap();
        assert!(stde_forward(&Tensor4::zeros([1, 1, 64, 7]), &params, &cfg).is_err());
    }

    #[test]
    fn mste_zero_input_passes_e_s_through() {
        let cfg = ModelConfig::with_input(64, 128);
        let params = init_params::<f64>(&cfg, 0).unwrap();
        let e_t = Tensor4::zeros([1, 16, 64, 121]);
        let e_s = random_batch([1, 16, 1, 121], 2);
        let out = mste_forward(&e_t, &e_s, &params, &RunningStats::new(16), &cfg, true).unwrap();
        assert_eq!(out.u.shape(), [1, 16, 64, 117]);
        assert_eq!(out.s.shape(), [1, 16, 1, 121]);
        assert_eq!(out.e_s_prime, e_s);
    }

    #[test]
    fn ablation_toggles_pass_through() {
        let base = ModelConfig::with_input(16, 32).with_depth(8);
        let x = random_batch([2, 1, 16, 32], 9);
        let full = ListenNet::<f64>::new(base.clone(), 4).unwrap();
        let (_, full_cache) = full.forward(&x, true).unwrap();

        let no_mste = ListenNet {
            config: ModelConfig {
                use_mste: false,
                ..base.clone()
            },
            ..full.clone()
        };
        let (_, cache) = no_mste.forward(&x, true).unwrap();
        assert_eq!(cache.activations().e_s_prime, cache.activations().e_s);
        assert_eq!(cache.activations().e_s, full_cache.activations().e_s);
        assert_eq!(cache.activations().e_t, full_cache.activations().e_t);

        let no_cna = ListenNet {
            config: ModelConfig {
                use_cna: false,
                ..base
            },
            ..full.clone()
        };
        let (_, cache) = no_cna.forward(&x, true).unwrap();
        assert_eq!(cache.activations().e, cache.activations().e_s_prime);
        assert_eq!(cache.activations().e_s_prime, full_cache.activations().e_s_prime);
    }

    #[test]
    fn inference_is_deterministic_and_batch_equivariant() {
        let cfg = ModelConfig::with_input(16, 32).with_depth(8);
        let net = ListenNet::<f64>::new(cfg, 11).unwrap();
        let x = random_batch([3, 1, 16, 32], 5);
        let p = net.predict(&x).unwrap();
        assert_eq!(p, net.predict(&x).unwrap());
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }

        let plane = 16 * 32;
        let order = [2usize, 0, 1];
        let mut perm = Vec::new();
        for &i in &order {
            perm.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
        }
        let xp = Tensor4::from_vec(x.shape(), perm).unwrap();
        let pp = net.predict(&xp).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(pp.row(k, 0, 0), p.row(i, 0, 0));
        }

        let mut same = Vec::new();
        for _ in 0..2 {
            same.extend_from_slice(&x.data()[..plane]);
        }
        let ps = net.predict(&Tensor4::from_vec([2, 1, 16, 32], same).unwrap()).unwrap();
        assert_eq!(ps.row(0, 0, 0), ps.row(1, 0, 0));
    }

    #[test]
    fn zero_upstream_and_disconnected_mste_give_zero_grads() {
        let cfg = ModelConfig::with_input(16, 32).with_depth(8);
        let net = ListenNet::<f64>::new(cfg.clone(), 3).unwrap();
        let x = random_batch([2, 1, 16, 32], 1);
        let (p, cache) = net.forward(&x, true).unwrap();
        let g = net.backward(cache, &Tensor4::zeros(p.shape())).unwrap();
        assert!(g.is_all_zero());

        let ablated = ListenNet {
            config: ModelConfig {
                use_mste: false,
                ..cfg
            },
            ..net
        };
        let (p, cache) = ablated.forward(&x, true).unwrap();
        let g = ablated.backward(cache, &p.map(|v| v - 0.3)).unwrap();
        assert!(g.mste_branches.iter().all(|b| b.weight.data().iter().all(|&v| v == 0.0)));
        assert!(g.mste_skip.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.mste_norm.gamma.iter().all(|&v| v == 0.0));
        assert!(g.classifier.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_grad() {
        let cfg = ModelConfig::with_input(16, 32).with_depth(8);
        let net = ListenNet::<f64>::new(cfg, 3).unwrap();
        let (_, cache) = net.forward(&random_batch([2, 1, 16, 32], 1), false).unwrap();
        assert!(net.backward(cache, &Tensor4::zeros([3, 1, 1, 2])).is_err());
    }

    #[test]
    fn cna_group_shapes() {
        let cfg = ModelConfig::with_input(64, 128);
        let net = ListenNet::<f32>::new(cfg, 0).unwrap();
        let (_, cache) = net.forward(&Tensor4::new([2, 1, 64, 128], 0.1).unwrap(), false).unwrap();
        let a = cache.activations();
        assert_eq!(a.f_t.as_ref().unwrap().shape(), [16, 2, 16, 121]);
        assert_eq!(a.f_s.as_ref().unwrap().shape(), [16, 2, 1, 121]);
        assert_eq!(a.w.as_ref().unwrap().shape(), [16, 1, 1, 121]);
    }
}
