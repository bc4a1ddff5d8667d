use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function.
///
/// Any non-finite evaluation of `f` is reported as a gradient-check failure.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> T,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck(format!("objective not finite around coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (eps + eps);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T], floor: T) -> T {
    let diff = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{log_softmax, softmax};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3f64, -2.0, 5.5]);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_squared_norm() {
        let x = Tensor::vector(vec![3.0f64, -1.0]);
        let g = finite_diff_grad(|t: &Tensor<f64>| 0.5 * t.norm().powi(2), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
        assert!((g.data()[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::vector((0..6).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>());
        let gold = 4;
        let ce = |t: &Tensor<f64>| -log_softmax(t).unwrap().data()[gold];
        let g = finite_diff_grad(ce, &z, 1e-5).unwrap();
        let analytic = softmax(&z).unwrap().sub(&Tensor::one_hot(6, gold)).unwrap();
        assert!(relative_error(g.data(), analytic.data(), 1e-12) < 1e-6);
    }

    #[test]
    fn nan_objective_is_reported() {
        let x = Tensor::vector(vec![1.0f64]);
        let r = finite_diff_grad(|_: &Tensor<f64>| f64::NAN, &x, 1e-3);
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }
}
