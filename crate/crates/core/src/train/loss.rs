use crate::error::{Error, Result};
use crate::preprocess::Label;
use crate::tensor::{Scalar, Tensor4};

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy on the class-1 probability, and its gradient
/// with respect to `probs: (B,1,1,2)`. The gradient is evaluated at the
/// clamped probability so saturated mistakes still push back.
pub fn bce_loss<T: Scalar>(probs: &Tensor4<T>, labels: &[Label]) -> Result<(T, Tensor4<T>)> {
    let [b, d, h, w] = probs.shape();
    if d != 1 || h != 1 || w != 2 || b != labels.len() || b == 0 {
        return Err(Error::shape(format!(
            "bce_loss: probs {:?} with {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let n = T::lit(b as f64);
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Tensor4::zeros(probs.shape());
    for (i, label) in labels.iter().enumerate() {
        let q = probs.at(i, 0, 0, 1).max(lo).min(hi);
        let (term, dq) = match label {
            Label::Right => (q.ln(), -T::one() / q),
            Label::Left => ((T::one() - q).ln(), T::one() / (T::one() - q)),
        };
        loss -= term;
        *grad.at_mut(i, 0, 0, 1) = dq / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(q: &[f64]) -> Tensor4<f64> {
        let data = q.iter().flat_map(|&q| [1.0 - q, q]).collect();
        Tensor4::from_vec([q.len(), 1, 1, 2], data).unwrap()
    }

    #[test]
    fn perfect_and_chance_predictions() {
        let (l, _) = bce_loss(&probs(&[1.0]), &[Label::Right]).unwrap();
        assert!(l < 1e-6);
        let (l, _) = bce_loss(&probs(&[0.5, 0.5]), &[Label::Right, Label::Left]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let q = [0.2, 0.7, 0.55];
        let labels = [Label::Right, Label::Left, Label::Right];
        let (_, g) = bce_loss(&probs(&q), &labels).unwrap();
        let eps = 1e-6;
        for i in 0..q.len() {
            let mut p = probs(&q);
            *p.at_mut(i, 0, 0, 1) += eps;
            let up = bce_loss(&p, &labels).unwrap().0;
            *p.at_mut(i, 0, 0, 1) -= 2.0 * eps;
            let down = bce_loss(&p, &labels).unwrap().0;
            let numeric = (up - down) / (2.0 * eps);
            assert!((numeric - g.at(i, 0, 0, 1)).abs() < 1e-5);
            assert_eq!(g.at(i, 0, 0, 0), 0.0);
        }
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        assert!(bce_loss(&probs(&[0.3]), &[]).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(q in 0.0f64..=1.0, right in any::<bool>()) {
            let label = if right { Label::Right } else { Label::Left };
            let (l, g) = bce_loss(&probs(&[q]), &[label]).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
            prop_assert!(g.data().iter().all(|v| v.is_finite()));
        }
    }
}
