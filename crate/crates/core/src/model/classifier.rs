use super::params::{ListenNetParams, ParamGrads};
use crate::error::Result;
use crate::layers::{activation_backward, activation_forward, linear_backward, linear_forward, ActivationCache, LinearCache};
use crate::tensor::{adaptive_avg_pool, adaptive_avg_pool_backward, Activation, Axis, Scalar, Tensor4};

#[derive(Debug, Clone)]
pub struct ClassifierCache<T> {
    input_shape: [usize; 4],
    linear: LinearCache<T>,
    softmax: ActivationCache<T>,
}

/// Global average pool, linear layer, softmax: `(B,D,H,W) -> (B,1,1,2)`.
pub fn classify<T: Scalar>(e: &Tensor4<T>, params: &ListenNetParams<T>) -> Result<(Tensor4<T>, ClassifierCache<T>)> {
    let [b, d, _, _] = e.shape();
    let pooled = adaptive_avg_pool(e, 1, 1)?.reshape([b, 1, 1, d])?;
    let (logits, linear) = linear_forward(&pooled, &params.classifier)?;
    let (probs, softmax) = activation_forward(&logits, Activation::Softmax(Axis::Width));
    Ok((
        probs,
        ClassifierCache {
            input_shape: e.shape(),
            linear,
            softmax,
        },
    ))
}

pub fn classify_backward<T: Scalar>(
    cache: &ClassifierCache<T>,
    grad_probs: &Tensor4<T>,
    grads: &mut ParamGrads<T>,
) -> Result<Tensor4<T>> {
    let [b, d, _, _] = cache.input_shape;
    let g = activation_backward(&cache.softmax, grad_probs)?;
    let g = linear_backward(&cache.linear, &g)?;
    grads.classifier = g.params;
    adaptive_avg_pool_backward(&g.input.reshape([b, d, 1, 1])?, cache.input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_classifier_is_uniform() {
        let cfg = ModelConfig::default();
        let params = ListenNetParams::<f64>::zeros(&cfg);
        let e = Tensor4::from_vec([2, 16, 1, 3], (0..96).map(|v| v as f64).collect()).unwrap();
        let (p, _) = classify(&e, &params).unwrap();
        assert_eq!(p.shape(), [2, 1, 1, 2]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn log_three_logit_gives_three_quarters() {
        let cfg = ModelConfig::default();
        let mut params = ListenNetParams::<f64>::zeros(&cfg);
        params.classifier.bias = vec![3f64.ln(), 0.0];
        let (p, _) = classify(&Tensor4::zeros([1, 16, 1, 4]), &params).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);
    }
}
