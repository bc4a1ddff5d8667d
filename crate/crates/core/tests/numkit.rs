use chainboost::numkit::{finite_diff_grad, layer_norm, softmax, softmax_jacobian, Tensor};
use chainboost::transformer::seeded_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use proptest::prelude::*;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..=max_len)
}

proptest! {
    #[test]
    fn softmax_ignores_constant_shift(z in logits(12), c in -100.0f64..100.0) {
        let a = softmax(&Tensor::vector(z.clone())).unwrap();
        let b = softmax(&Tensor::vector(z.iter().map(|x| x + c).collect())).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero_and_it_is_symmetric(z in logits(10)) {
        let j = softmax_jacobian(&Tensor::vector(z.clone())).unwrap();
        let v = z.len();
        for i in 0..v {
            let s: f64 = j.row(i).iter().sum();
            prop_assert!(s.abs() <= 1e-12);
            for k in 0..v {
                prop_assert_eq!(j.at(i, k), j.at(k, i));
            }
        }
    }

    #[test]
    fn layer_norm_ignores_shift_and_positive_scale(
        h in prop::collection::vec(-10.0f64..10.0, 2..=16),
        shift in -20.0f64..20.0,
        scale in 0.1f64..10.0,
    ) {
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        prop_assume!(h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() > 1e-3);
        let d = h.len();
        let (g, b) = (Tensor::filled(&[d], 1.0), Tensor::zeros(&[d]));
        let base = layer_norm(&Tensor::vector(h.clone()), &g, &b, 0.0).unwrap();
        let moved = layer_norm(&Tensor::vector(h.iter().map(|x| scale * x + shift).collect()), &g, &b, 0.0).unwrap();
        for (x, y) in base.data().iter().zip(moved.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn layer_norm_statistics_on_random_input() {
    let mut rng = seeded_rng(8);
    let raw: Vec<f64> = (0..8).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let m0 = raw.iter().sum::<f64>() / 8.0;
    let v0 = raw.iter().map(|x| (x - m0).powi(2)).sum::<f64>() / 8.0;
    let out = layer_norm(&Tensor::vector(raw), &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
    let mean = out.data().iter().sum::<f64>() / 8.0;
    let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-12);
    // eps shrinks the variance to v/(v+eps)
    assert!((var - v0 / (v0 + 1e-5)).abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn jacobian_matches_finite_differences_of_softmax() {
    let z = Tensor::<f64>::vector(vec![0.2, -1.1, 0.7, 2.0, -0.3]);
    let j = softmax_jacobian(&z).unwrap();
    for i in 0..5 {
        let fd = finite_diff_grad(|x| softmax(x).unwrap().data()[i], &z, 1e-6).unwrap();
        for k in 0..5 {
            assert!((fd.data()[k] - j.at(i, k)).abs() < 1e-8);
        }
    }
}
