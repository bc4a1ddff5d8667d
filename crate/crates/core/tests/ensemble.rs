use chainboost::ensemble::{
    build_fusion_inputs, error_tokens, error_tokens_partial, fuse_hidden, fuse_logits, load_ensemble, save_ensemble,
    topk_mask, Ensemble, EnsembleSpec,
};
use chainboost::numkit::{layer_norm, Tensor};
use chainboost::pipeline::decode_sequential;
use chainboost::transformer::{forward_teacher, seeded_rng, ModelSpec};
use chainboost::Error;
use proptest::prelude::*;
use rand::Rng;

fn v(x: &[f64]) -> Tensor<f64> {
    Tensor::vector(x.to_vec())
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
}

fn small_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 10,
        max_steps: 12,
        fusion_period: 1,
        adapter_rank: 0,
        seed,
    }
}

#[test]
fn fuse_hidden_examples() {
    let own = v(&[1.0, -2.0, 0.5, 3.0]);
    let pred = v(&[0.4, 0.1, -0.7, 2.0]);
    assert_eq!(fuse_hidden(&own, &pred, 3, 2).unwrap(), own);
    let cancel = fuse_hidden(&own, &own.scale(-1.0), 2, 2).unwrap();
    assert!(cancel.data().iter().all(|&x| x == 0.0));

    let mut rng = seeded_rng(3);
    let (a, b) = (random_vec(&mut rng, 8), random_vec(&mut rng, 8));
    let oracle = layer_norm(&a.add(&b).unwrap(), &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
    assert_eq!(fuse_hidden(&a, &b, 4, 2).unwrap(), oracle);
    assert!(matches!(fuse_hidden(&a, &v(&[1.0]), 2, 2), Err(Error::Shape(_))));
}

#[test]
fn error_token_examples() {
    let z = vec![v(&[0.0, 3.0, 1.0]), v(&[2.0, 0.0, 1.0])];
    assert_eq!(error_tokens(&z, &[1, 0]).unwrap(), vec![None, None]);
    assert_eq!(error_tokens(&[v(&[5.0, 1.0, 0.0])], &[1]).unwrap(), vec![Some(0)]);
    assert!(error_tokens(&z, &[1]).is_err());
    assert_eq!(error_tokens_partial(&[v(&[5.0, 1.0, 0.0])], &[None]).unwrap(), vec![None]);
}

#[test]
fn error_tokens_match_brute_force() {
    let mut rng = seeded_rng(9);
    let z: Vec<Tensor<f64>> = (0..20).map(|_| random_vec(&mut rng, 16)).collect();
    let gold: Vec<usize> = (0..20).map(|_| rng.random_range(0..16)).collect();
    let trace = error_tokens(&z, &gold).unwrap();
    for t in 0..20 {
        let d = z[t].data();
        let mut best = 0;
        for i in 1..16 {
            if d[i] > d[best] {
                best = i;
            }
        }
        assert_eq!(trace[t], (best != gold[t]).then_some(best));
    }
}

#[test]
fn topk_examples() {
    let z = v(&[3.0, -1.0, 2.0]);
    assert_eq!(topk_mask(&z, 3).unwrap(), z);
    assert_eq!(topk_mask(&z, 1).unwrap(), v(&[3.0, 0.0, 0.0]));
    assert_eq!(topk_mask(&v(&[2.0, 2.0, 1.0]), 1).unwrap(), v(&[2.0, 0.0, 0.0]));
    assert_eq!(topk_mask(&v(&[1.0, 2.0, 2.0, 2.0]), 2).unwrap(), v(&[0.0, 2.0, 2.0, 0.0]));
    assert!(matches!(topk_mask(&z, 0), Err(Error::Range(_))));
    assert!(matches!(topk_mask(&z, 4), Err(Error::Range(_))));
}

#[test]
fn fuse_logits_examples() {
    let z0 = v(&[1.0, 2.0, 3.0]);
    assert_eq!(fuse_logits(&[z0.clone()], &[], 2).unwrap(), z0);
    let z1 = v(&[0.5, -1.0, 4.0]);
    assert_eq!(fuse_logits(&[z0.clone(), z1.clone()], &[1.0], 3).unwrap(), z0.add(&z1).unwrap());
    assert!(fuse_logits(&[z0.clone(), z1], &[], 2).is_err());
    assert!(fuse_logits(&[z0, v(&[1.0])], &[0.3], 1).is_err());
}

#[test]
fn fuse_logits_matches_per_index_evaluation() {
    let mut rng = seeded_rng(21);
    let zs: Vec<Tensor<f64>> = (0..3).map(|_| random_vec(&mut rng, 6)).collect();
    let fused = fuse_logits(&zs, &[0.3, 0.3], 2).unwrap();
    for idx in 0..6 {
        let mut expect = zs[0].data()[idx];
        for z in &zs[1..] {
            let above = z.data().iter().enumerate().filter(|&(j, &x)| x > z.data()[idx] || (x == z.data()[idx] && j < idx)).count();
            if above < 2 {
                expect += 0.3 * z.data()[idx];
            }
        }
        assert!((fused.data()[idx] - expect).abs() < 1e-15);
    }
}

#[test]
fn fusion_input_bookkeeping() {
    let m = chainboost::transformer::Transformer::<f64>::new(small_spec(1)).unwrap();
    let trace = forward_teacher(&m, &[1, 2, 3], None).unwrap();
    assert!(build_fusion_inputs(&trace, 3, 2).unwrap().iter().all(|f| f.is_empty()));
    let dense = build_fusion_inputs(&trace, 1, 2).unwrap();
    assert_eq!(dense.len(), 3);
    for (t, f) in dense.iter().enumerate() {
        assert_eq!(f.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(f[&1], trace.states[t][0]);
        assert_eq!(f[&2], trace.states[t][1]);
        assert!(f.values().all(|h| h.len() == 8));
    }
    assert!(build_fusion_inputs(&trace, 1, 5).is_err());
}

#[test]
fn vocab_mismatch_is_refused() {
    let mut spec = EnsembleSpec::uniform(&small_spec(1), 2);
    spec.models[1].vocab = 12;
    let err = spec.validate().unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { index: 1, expected: 10, found: 12 }));
    assert!(err.to_string().contains("vocabular"));
}

#[test]
fn manifest_round_trip_reproduces_decoding() {
    let ens = Ensemble::<f64>::new(&EnsembleSpec::uniform(&small_spec(4), 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_ensemble(&ens, dir.path()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("lambdas") && text.contains("model_2.json"));
    let back = load_ensemble::<f64>(&path).unwrap();
    let a = decode_sequential(&ens, &[1, 2], 6).unwrap();
    let b = decode_sequential(&back, &[1, 2], 6).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn error_trace_never_stores_gold(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..10),
        seed in 0u64..1000,
    ) {
        let z: Vec<Tensor<f64>> = rows.into_iter().map(Tensor::vector).collect();
        let mut rng = seeded_rng(seed);
        let gold: Vec<usize> = z.iter().map(|_| rng.random_range(0..6)).collect();
        for (e, g) in error_tokens(&z, &gold).unwrap().iter().zip(&gold) {
            prop_assert!(*e != Some(*g));
        }
    }

    #[test]
    fn topk_keeps_values_in_place(z in prop::collection::vec(-5.0f64..5.0, 1..12), k in 1usize..12) {
        prop_assume!(k <= z.len());
        let m = topk_mask(&Tensor::vector(z.clone()), k).unwrap();
        let kept: Vec<usize> = (0..z.len()).filter(|&i| m.data()[i] != 0.0 || z[i] == 0.0).collect();
        for i in 0..z.len() {
            prop_assert!(m.data()[i] == 0.0 || m.data()[i] == z[i]);
        }
        prop_assert!(kept.len() >= k);
    }

    #[test]
    fn fused_equals_base_outside_every_topk(
        z0 in prop::collection::vec(-5.0f64..5.0, 8),
        z1 in prop::collection::vec(-5.0f64..5.0, 8),
        lam in 0.01f64..2.0,
    ) {
        let (a, b) = (Tensor::vector(z0.clone()), Tensor::vector(z1));
        let mask = topk_mask(&b, 2).unwrap();
        let fused = fuse_logits(&[a, b], &[lam], 2).unwrap();
        for i in 0..8 {
            if mask.data()[i] == 0.0 {
                prop_assert_eq!(fused.data()[i], z0[i]);
            }
        }
    }
}
