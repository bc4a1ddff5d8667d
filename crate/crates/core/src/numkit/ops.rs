use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probability vector of a 1-D logit tensor (max-subtracted).
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    z.expect_vector("softmax")?;
    Ok(Tensor::vector(softmax_slice(z.data())))
}

pub(crate) fn softmax_slice<T: Scalar>(z: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    softmax_into(z, &mut out);
    out
}

pub(crate) fn softmax_into<T: Scalar>(z: &[T], out: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log softmax(z)` computed as `z - max - log Σ exp(z - max)`.
pub fn log_softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    z.expect_vector("log_softmax")?;
    let max = z.data().iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok(z.map(|v| v - lse))
}

/// `J = diag(p) - p pᵀ` with `p = softmax(z)`.
pub fn softmax_jacobian<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let v = z.expect_vector("softmax_jacobian")?;
    let p = softmax_slice(z.data());
    let mut j = vec![T::zero(); v * v];
    for a in 0..v {
        for b in 0..v {
            let delta = if a == b { p[a] } else { T::zero() };
            j[a * v + b] = delta - p[a] * p[b];
        }
    }
    Tensor::new(vec![v, v], j)
}

/// `gain ⊙ (h − mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm<T: Scalar>(h: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = h.expect_vector("layer_norm")?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm: h {:?}, gain {:?}, bias {:?}",
            h.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut xhat = vec![T::zero(); d];
    normalize_into(h.data(), eps, &mut xhat);
    let out = xhat.iter().zip(gain.data()).zip(bias.data()).map(|((&x, &g), &b)| g * x + b).collect();
    Ok(Tensor::vector(out))
}

/// Writes the zero-mean, unit-variance normalization of `x` into `xhat` and
/// returns `1 / sqrt(var + eps)`.
pub(crate) fn normalize_into<T: Scalar>(x: &[T], eps: T, xhat: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (o, &v) in xhat.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Backward through `xhat = normalize(x)`: given `d xhat`, returns `dx`.
pub(crate) fn normalize_backward<T: Scalar>(xhat: &[T], inv_std: T, dxhat: &[T], dx: &mut [T]) {
    let n = T::of(xhat.len() as f64);
    let sum_d = dxhat.iter().copied().sum::<T>();
    let sum_dx = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>();
    for ((o, &dh), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std / n * (n * dh - sum_d - xh * sum_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-log σ(x)`, evaluated without overflow for large `|x|`.
#[inline]
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Tensor<f64> {
        Tensor::vector(xs.to_vec())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(softmax(&v(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5], 1e-15));
        assert!(close(softmax(&v(&[7.5; 4])).unwrap().data(), &[0.25; 4], 1e-15));
        let p = softmax(&v(&[0.0, 2f64.ln()])).unwrap();
        assert!(close(p.data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_rejects_matrix() {
        let m = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(softmax(&m), Err(Error::Shape(_))));
        assert!(matches!(softmax_jacobian(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&v(&[50.0, -50.0, 49.0])).unwrap();
        assert!(p.is_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_at_origin() {
        let j = softmax_jacobian(&v(&[0.0, 0.0])).unwrap();
        assert!(close(j.data(), &[0.25, -0.25, -0.25, 0.25], 1e-15));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::vector((0..5).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        let j = softmax_jacobian(&z).unwrap();
        for i in 0..5 {
            let g = finite_diff_grad(|x: &Tensor<f64>| softmax(x).unwrap().data()[i], &z, 1e-5).unwrap();
            // row i of J is the gradient of p_i
            let err = j.row(i).iter().zip(g.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "row {i} err {err}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = v(&[1.0; 4]);
        let zeros = v(&[0.0; 4]);
        let out = layer_norm(&v(&[3.0; 4]), &ones, &zeros, 1e-5).unwrap();
        assert!(close(out.data(), &[0.0; 4], 0.0));

        let out = layer_norm(&v(&[1.0, -1.0]), &v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 0.0).unwrap();
        assert!(close(out.data(), &[1.0, -1.0], 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::vector((0..8).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>());
        let out = layer_norm(&h, &v(&[1.0; 8]), &v(&[0.0; 8]), 1e-5).unwrap();
        let mean = out.data().iter().sum::<f64>() / 8.0;
        let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        let hm = h.data().iter().sum::<f64>() / 8.0;
        let hv = h.data().iter().map(|x| (x - hm).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - hv / (hv + 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = v(&[0.3, -1.2, 2.0, 0.7, -0.4]);
        let w = [0.5, -1.0, 0.25, 2.0, 1.5];
        let f = |t: &Tensor<f64>| {
            let mut xh = vec![0.0; 5];
            normalize_into(t.data(), 1e-5, &mut xh);
            xh.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut xh = vec![0.0; 5];
        let inv = normalize_into(x.data(), 1e-5, &mut xh);
        let mut dx = vec![0.0; 5];
        normalize_backward(&xh, inv, &w, &mut dx);
        let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
        assert!(close(&dx, fd.data(), 1e-8));
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.2, 1.7, 4.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn neg_log_sigmoid_is_stable() {
        assert!((neg_log_sigmoid(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(neg_log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((neg_log_sigmoid(-800.0f64) - 800.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..12), c in -30.0f64..30.0) {
            let a = softmax(&v(&z)).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = softmax(&v(&shifted)).unwrap();
            prop_assert!(close(a.data(), b.data(), 1e-12));
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn jacobian_rows_sum_to_zero(z in prop::collection::vec(-25.0f64..25.0, 1..12)) {
            let j = softmax_jacobian(&v(&z)).unwrap();
            let n = z.len();
            for i in 0..n {
                prop_assert!(j.row(i).iter().sum::<f64>().abs() < 1e-12);
                for k in 0..n {
                    prop_assert_eq!(j.at(i, k), j.at(k, i));
                }
            }
        }

        #[test]
        fn layer_norm_shift_and_scale_invariant(
            h in prop::collection::vec(-5.0f64..5.0, 2..10),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let mean = h.iter().sum::<f64>() / h.len() as f64;
            let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h.len() as f64;
            prop_assume!(var > 1e-3);
            let d = h.len();
            let g = v(&vec![1.0; d]);
            let b = v(&vec![0.0; d]);
            let base = layer_norm(&v(&h), &g, &b, 0.0).unwrap();
            let moved: Vec<f64> = h.iter().map(|x| x * scale + shift).collect();
            let other = layer_norm(&v(&moved), &g, &b, 0.0).unwrap();
            prop_assert!(close(base.data(), other.data(), 1e-9));
        }
    }
}
