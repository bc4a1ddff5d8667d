use chainboost::numkit::{softmax, Tensor};
use chainboost::tasks::{gen_dataset, TaskKind, TaskSpec};
use chainboost::theory::{descent_probe, effective_contribution, log_grid, mse_sweep, remainder_probe, softmax_remainder};
use chainboost::training::StageInputs;
use chainboost::transformer::{seeded_rng, ModelSpec, Transformer};
use chainboost::verify::descent_setup;
use proptest::prelude::*;
use rand::Rng;

fn v(x: &[f64]) -> Tensor<f64> {
    Tensor::vector(x.to_vec())
}

#[test]
fn effective_contribution_examples() {
    let g = effective_contribution(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
    assert_eq!(g.data(), &[0.25, -0.25]);
    let z = v(&[0.3, -1.2, 2.0, 0.0, 0.7, -0.4]);
    let n = v(&[1.0, 0.5, -0.3, 2.2, -1.0, 0.1]);
    let p = softmax(&z).unwrap();
    let got = effective_contribution(&z, &n).unwrap();
    for i in 0..6 {
        let mut row = 0.0;
        for j in 0..6 {
            let jij = p.data()[i] * (if i == j { 1.0 } else { 0.0 } - p.data()[j]);
            row += jij * n.data()[j];
        }
        assert!((got.data()[i] - row).abs() < 1e-15);
    }
    assert!(effective_contribution(&z, &v(&[1.0])).is_err());
}

proptest! {
    #[test]
    fn constant_shift_has_no_effect(z in prop::collection::vec(-10.0f64..10.0, 2..12), c in -5.0f64..5.0) {
        let n = z.len();
        let g = effective_contribution(&Tensor::vector(z), &Tensor::filled(&[n], c)).unwrap();
        for x in g.data() {
            prop_assert!(x.abs() <= 1e-14 * c.abs().max(1.0));
        }
    }
}

#[test]
fn remainder_examples() {
    let z = v(&[0.4, -2.0, 1.1, 0.0, 3.0, -0.5, 0.9, 1.7]);
    assert!(softmax_remainder(&z, &Tensor::zeros(&[8])).unwrap().data().iter().all(|&x| x == 0.0));
    let fit = remainder_probe(&z, &log_grid(1e-3, 1e-1, 9), 64, 4).unwrap();
    assert!((fit.exponent - 2.0).abs() <= 0.1, "{}", fit.exponent);
    assert!(fit.envelope_holds() && fit.c_fit <= 0.5);
    assert!(remainder_probe(&z, &[1e-3, 1e-2], 4, 1).is_err());
    assert!(remainder_probe(&z, &[1e-2, 2e-2, 5e-2], 4, 1).is_err());
}

#[test]
fn remainder_exponent_holds_for_large_logits() {
    let mut rng = seeded_rng(12);
    for _ in 0..10 {
        let z = Tensor::vector((0..16).map(|_| rng.random_range(-10.0..10.0)).collect());
        let fit = remainder_probe(&z, &log_grid(1e-3, 1e-1, 9), 16, 3).unwrap();
        assert!((1.9..=2.1).contains(&fit.exponent), "{}", fit.exponent);
        assert!(fit.envelope_holds());
    }
}

fn random_sets(seed: u64, n: usize, v: usize) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut g = Vec::new();
    for _ in 0..n {
        let gold = rng.random_range(0..v);
        a.push(Tensor::vector((0..v).map(|_| rng.random_range(-2.0..2.0)).collect()));
        b.push(Tensor::vector((0..v).map(|i| if i == gold { 1.5 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect()));
        g.push(gold);
    }
    (a, b, g)
}

#[test]
fn mse_sweep_examples() {
    let (prev, new, gold) = random_sets(5, 200, 8);
    let zeros: Vec<Tensor<f64>> = prev.iter().map(|_| Tensor::zeros(&[8])).collect();
    let grid = log_grid(1e-3, 0.5, 10);
    let flat = mse_sweep(&prev, &zeros, &gold, &grid).unwrap();
    assert!(flat.points.iter().all(|p| p.delta_mse == 0.0 && p.mse == flat.predecessor_mse));
    assert!(flat.working_range.is_none());

    let rep = mse_sweep(&prev, &new, &gold, &grid).unwrap();
    assert!(rep.mean_eg > 0.0);
    let (lo, hi) = rep.working_range.unwrap();
    assert!(lo > 0.0 && hi <= 0.5 + 1e-12);
    let p0 = &rep.points[0];
    assert!((p0.delta_mse / p0.lambda + 2.0 * rep.mean_eg).abs() < 0.05 * 2.0 * rep.mean_eg);
    for p in &rep.points {
        assert!((p.per_dim_mse.iter().sum::<f64>() / 8.0 - p.mse).abs() < 1e-15);
    }
    assert!(rep.residual_order() >= 1.9);
}

#[test]
fn mse_sweep_rejects_bad_input() {
    let (prev, new, gold) = random_sets(1, 4, 5);
    assert!(mse_sweep::<f64>(&[], &[], &[], &[0.1]).is_err());
    assert!(mse_sweep(&prev, &new[..3], &gold, &[0.1]).is_err());
    assert!(mse_sweep(&prev, &new, &gold, &[0.0]).is_err());
    assert!(mse_sweep(&prev, &new, &gold, &[]).is_err());
}

#[test]
fn descent_without_errors_is_plain_gradient_descent() {
    let data = gen_dataset(&TaskSpec { kind: TaskKind::Modsum, samples: 16, ..TaskSpec::default() }).unwrap();
    let spec = ModelSpec { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, adapter_rank: 0, ..ModelSpec::default() };
    let m = Transformer::<f64>::new(spec).unwrap();
    let r = descent_probe(&m, &data, &StageInputs::standalone(&data), 0.9, 0.1, 60, 0.5, 0.9).unwrap();
    assert_eq!((r.rho, r.gamma), (0.0, 0.0));
    assert_eq!(r.violations, 0);
    assert!(r.within(0.9));
    // with no suppression term the bound is 2/(αL)
    assert!((r.bound.unwrap() - 2.0 / (0.9 * r.smoothness)).abs() < 1e-12 * r.bound.unwrap());
    assert!(r.ce.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn descent_far_above_the_bound_is_reported_not_asserted() {
    let (model, data, inputs) = descent_setup(TaskKind::Copy, 8).unwrap();
    let base = descent_probe(&model, &data, &inputs, 0.9, 0.1, 30, 0.05, 0.9).unwrap();
    let bound = base.bound.unwrap();
    let wild = descent_probe(&model, &data, &inputs, 0.9, 0.1, 30, 10.0 * bound, 10.0);
    // either a report (violations allowed) or a diagnosed divergence
    match wild {
        Ok(r) => assert_eq!(r.ce.len(), 31),
        Err(e) => assert!(matches!(e, chainboost::Error::Divergence(_)), "{e}"),
    }
}

#[test]
fn log_grid_hits_its_endpoints_exactly() {
    let g = log_grid(1e-2, 0.5, 12);
    assert_eq!((g.len(), g[0], g[11]), (12, 1e-2, 0.5));
    assert!(g.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(log_grid(0.3, 0.9, 1), vec![0.3]);
}
