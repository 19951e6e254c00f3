use crate::error::Result;
use crate::tensor::{elementwise, for_each_lane, sigmoid, Activation, Scalar, Tensor4};

#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    kind: Activation,
    input: Tensor4<T>,
    /// The output, or for GELU the normal CDF of the input.
    saved: Tensor4<T>,
}

fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7)
}

pub fn activation_forward<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> (Tensor4<T>, ActivationCache<T>) {
    let (y, saved) = match kind {
        Activation::Gelu => {
            let cdf = x.map(normal_cdf);
            let y = x.zip_map(&cdf, |v, p| v * p).expect("same shape");
            (y, cdf)
        }
        _ => {
            let y = elementwise(x, kind);
            (y.clone(), y)
        }
    };
    (
        y,
        ActivationCache {
            kind,
            input: x.clone(),
            saved,
        },
    )
}

/// `gelu'(x) = Phi(x) + x phi(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn activation_backward<T: Scalar>(cache: &ActivationCache<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad_out.expect_shape(cache.input.shape(), "activation_backward grad_out")?;
    match cache.kind {
        Activation::Gelu => {
            let local = cache.input.zip_map(&cache.saved, |x, p| p + x * normal_pdf(x))?;
            local.zip_map(grad_out, |d, g| g * d)
        }
        Activation::Sigmoid => cache.saved.zip_map(grad_out, |s, g| g * s * (T::one() - s)),
        Activation::Softmax(axis) => {
            let y = &cache.saved;
            let mut gx = Tensor4::zeros(y.shape());
            for_each_lane(y.shape(), axis, |lane| {
                let dot: T = lane.clone().map(|o| y.data()[o] * grad_out.data()[o]).sum();
                for o in lane {
                    gx.data_mut()[o] = y.data()[o] * (grad_out.data()[o] - dot);
                }
            });
            Ok(gx)
        }
    }
}

/// Sigmoid derivative expressed through the input.
pub fn sigmoid_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Axis;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn derivatives_at_zero() {
        let (_, c) = activation_forward(&scalar(0.0), Activation::Sigmoid);
        assert_eq!(activation_backward(&c, &scalar(1.0)).unwrap().data(), &[0.25]);
        let (_, c) = activation_forward(&scalar(0.0), Activation::Gelu);
        assert_eq!(activation_backward(&c, &scalar(1.0)).unwrap().data(), &[0.5]);
        assert_eq!(sigmoid_grad(0.0f64), 0.25);
    }

    #[test]
    fn softmax_backward_kills_uniform_grad() {
        let x = Tensor4::from_vec([1, 3, 1, 2], vec![0.1, -2.0, 1.5, 0.3, 0.0, 4.0]).unwrap();
        let (_, c) = activation_forward(&x, Activation::Softmax(Axis::Depth));
        let g = activation_backward(&c, &Tensor4::new(x.shape(), 0.7).unwrap()).unwrap();
        assert!(g.data().iter().all(|v: &f64| v.abs() < 1e-15));
    }
}
