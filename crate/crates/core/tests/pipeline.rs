use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use chainboost::ensemble::{Ensemble, EnsembleSpec};
use chainboost::numkit::Tensor;
use chainboost::pipeline::{decode_pipelined, decode_sequential, HiddenKey, PipelineOptions, StatePool};
use chainboost::training::chain_traces;
use chainboost::transformer::ModelSpec;
use chainboost::Error;

fn spec(seed: u64, period: usize) -> ModelSpec {
    ModelSpec {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 12,
        max_steps: 14,
        fusion_period: period,
        adapter_rank: 0,
        seed,
    }
}

fn ensemble(n_models: usize, period: usize, seed: u64) -> Ensemble<f64> {
    let mut s = EnsembleSpec::uniform(&spec(seed, period), n_models);
    s.lambdas = (0..n_models.saturating_sub(1)).map(|i| 0.3 + 0.4 * i as f64).collect();
    Ensemble::new(&s).unwrap()
}

const MS50: Duration = Duration::from_millis(50);

#[test]
fn put_then_get_is_bit_identical() {
    let pool = StatePool::new();
    let v = Tensor::vector(vec![0.1f64, -3.5e-300, f64::MAX]);
    let k = HiddenKey::new(1, 2, 3);
    pool.put(k, v.clone()).unwrap();
    assert_eq!(pool.get(k, MS50).unwrap(), v);
    assert_eq!(pool.take(k, MS50).unwrap().value, v);
    assert_eq!(pool.pending(), 0);
}

#[test]
fn duplicate_write_is_a_protocol_error() {
    let pool = StatePool::new();
    let k = HiddenKey::new(0, 0, 0);
    pool.put(k, Tensor::<f64>::vector(vec![1.0])).unwrap();
    assert!(matches!(pool.put(k, Tensor::vector(vec![2.0])), Err(Error::DuplicateWrite(_))));
    pool.take(k, MS50).unwrap();
    // consumed keys stay written
    assert!(matches!(pool.put(k, Tensor::vector(vec![3.0])), Err(Error::DuplicateWrite(_))));
    pool.put_logits(0, 0, Tensor::vector(vec![1.0])).unwrap();
    assert!(pool.put_logits(0, 0, Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn missing_key_times_out_as_deadlock_naming_the_key() {
    let pool = StatePool::<f64>::new();
    let t0 = Instant::now();
    let err = pool.get(HiddenKey::new(2, 1, 7), MS50).unwrap_err();
    assert!(t0.elapsed() >= MS50);
    match &err {
        Error::Deadlock { key, timeout_ms } => {
            assert_eq!(key, "h(model=2, layer=1, step=7)");
            assert_eq!(*timeout_ms, 50);
        }
        other => panic!("expected deadlock, got {other}"),
    }
    assert!(err.to_string().contains("h(model=2, layer=1, step=7)"));
}

#[test]
fn delayed_producer_releases_the_reader() {
    let pool = StatePool::<f64>::new();
    let k = HiddenKey::new(0, 1, 0);
    thread::scope(|s| {
        s.spawn(|| {
            thread::sleep(Duration::from_millis(10));
            pool.put(k, Tensor::vector(vec![4.0])).unwrap();
        });
        let t0 = Instant::now();
        let h = pool.take(k, Duration::from_secs(5)).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(10));
        assert_eq!(h.value.data(), &[4.0]);
        assert!(h.blocked() >= Duration::from_millis(9));
    });
}

#[test]
fn abort_wakes_blocked_readers() {
    let pool = StatePool::<f64>::new();
    thread::scope(|s| {
        let r = s.spawn(|| pool.get(HiddenKey::new(0, 0, 0), Duration::from_secs(5)));
        thread::sleep(Duration::from_millis(10));
        pool.abort("worker failed");
        assert!(matches!(r.join().unwrap(), Err(Error::DecodeAborted { .. })));
    });
    assert_eq!(pool.abort_reason().as_deref(), Some("worker failed"));
}

#[test]
fn stress_across_four_workers_loses_and_duplicates_nothing() {
    let pool = StatePool::<f64>::new();
    let (sum, errors) = (AtomicUsize::new(0), AtomicUsize::new(0));
    thread::scope(|s| {
        for w in 0..4usize {
            let (pool, sum, errors) = (&pool, &sum, &errors);
            s.spawn(move || {
                for j in 0..250usize {
                    let id = w * 250 + j;
                    // each worker writes its own keys and reads its neighbour's
                    if pool.put(HiddenKey::new(w, 0, j), Tensor::vector(vec![id as f64])).is_err() {
                        errors.fetch_add(1, Ordering::Relaxed);
                    }
                    let src = (w + 1) % 4;
                    match pool.take(HiddenKey::new(src, 0, j), Duration::from_secs(5)) {
                        Ok(h) => {
                            assert_eq!(h.value.data()[0] as usize, src * 250 + j);
                            sum.fetch_add(h.value.data()[0] as usize, Ordering::Relaxed);
                        }
                        Err(_) => {
                            errors.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            });
        }
    });
    assert_eq!(errors.load(Ordering::Relaxed), 0);
    assert_eq!(sum.load(Ordering::Relaxed), (0..1000).sum::<usize>());
    assert_eq!(pool.pending(), 0);
}

#[test]
fn pipelined_matches_sequential_on_a_grid() {
    let mut cases = 0;
    for n_models in 1..=3 {
        for period in [1, 2, 4] {
            for seed in [1u64, 2] {
                let ens = ensemble(n_models, period, seed);
                for prompt in [vec![3usize], vec![0, 5, 2], vec![7, 7, 1, 9]] {
                    let seq = decode_sequential(&ens, &prompt, 8).unwrap();
                    for executors in [None, Some(1)] {
                        let opts = PipelineOptions { executors, ..PipelineOptions::default() };
                        let (pipe, report) = decode_pipelined(&ens, &prompt, 8, &opts).unwrap();
                        assert_eq!(pipe.tokens, seq.tokens);
                        for (a, b) in pipe.fused_logits.iter().zip(&seq.fused_logits) {
                            for (x, y) in a.data().iter().zip(b.data()) {
                                assert!((x - y).abs() <= 1e-9);
                            }
                        }
                        assert_eq!(report.executors, executors.unwrap_or(n_models));
                        cases += 1;
                    }
                }
            }
        }
    }
    assert!(cases >= 20);
}

#[test]
fn sequential_matches_a_teacher_forced_oracle() {
    let ens = ensemble(2, 1, 5);
    let prompt = vec![2usize, 4];
    let out = decode_sequential(&ens, &prompt, 6).unwrap();
    let mut seq = prompt.clone();
    for (k, &tok) in out.tokens.iter().enumerate() {
        let traces = chain_traces(&ens, &seq).unwrap();
        let zs: Vec<Tensor<f64>> = traces.iter().map(|t| t.logits.last().unwrap().clone()).collect();
        let fused = ens.fuse(&zs).unwrap();
        assert_eq!(fused.argmax(), tok);
        for (x, y) in fused.data().iter().zip(out.fused_logits[k].data()) {
            assert!((x - y).abs() < 1e-12);
        }
        seq.push(tok);
    }
}

#[test]
fn single_model_decode_is_plain_greedy() {
    let ens = ensemble(1, 2, 3);
    let out = decode_sequential(&ens, &[1], 5).unwrap();
    let mut seq = vec![1usize];
    for &tok in &out.tokens {
        let z = chain_traces(&ens, &seq).unwrap().pop().unwrap();
        assert_eq!(z.logits.last().unwrap().argmax(), tok);
        seq.push(tok);
    }
    let (pipe, _) = decode_pipelined(&ens, &[1], 5, &PipelineOptions { executors: Some(1), ..Default::default() }).unwrap();
    assert_eq!(pipe, out);
    assert_eq!(decode_sequential(&ens, &[1], 5).unwrap(), out);
}

#[test]
fn decode_stops_at_limits() {
    let ens = ensemble(2, 2, 1);
    assert!(decode_sequential(&ens, &[1], 3).unwrap().tokens.len() <= 3);
    assert!(decode_sequential(&ens, &[1], 0).unwrap().tokens.is_empty());
    let long: Vec<usize> = (0..14).map(|i| i % 10).collect();
    assert!(decode_sequential(&ens, &long, 5).unwrap().tokens.len() <= 1);
    assert!(matches!(decode_sequential(&ens, &[], 3), Err(Error::Contract(_))));
    let too_long: Vec<usize> = vec![1; 15];
    assert!(matches!(decode_sequential(&ens, &too_long, 3), Err(Error::Range(_))));
    assert!(matches!(decode_pipelined(&ens, &[12], 3, &PipelineOptions::default()), Err(Error::Range(_))));
    for out in [decode_sequential(&ens, &[1], 20).unwrap()] {
        if let Some(pos) = out.tokens.iter().position(|&t| t == 11) {
            assert_eq!(pos + 1, out.tokens.len());
        }
    }
}

#[test]
fn timing_report_respects_the_wavefront() {
    let ens = ensemble(3, 1, 4);
    let (out, rep) = decode_pipelined(&ens, &[1, 2], 4, &PipelineOptions::default()).unwrap();
    let steps = 1 + out.tokens.len();
    assert_eq!(rep.layers.len(), steps * 3 * 3);
    assert!(rep.wall_us > 0.0 && rep.per_token_us > 0.0);
    assert!(rep.blocked_us >= 0.0 && rep.state_passing_us >= 0.0);
    let find = |m: usize, l: usize, t: usize| rep.layers.iter().find(|x| (x.model, x.layer, x.step) == (m, l, t)).unwrap();
    for x in &rep.layers {
        assert!(x.finish_us >= x.start_us);
        if x.layer > 1 {
            assert!(x.start_us >= find(x.model, x.layer - 1, x.step).finish_us);
        }
        if x.model > 0 {
            let ready = x.input_ready_us.expect("every layer fuses at period 1");
            assert!(x.start_us >= ready);
        } else {
            assert!(x.input_ready_us.is_none());
        }
    }
}

#[test]
fn aborted_decode_reports_a_prefix_of_the_reference() {
    let ens = ensemble(3, 1, 6);
    let reference = decode_sequential(&ens, &[3], 10).unwrap();
    let opts = PipelineOptions { executors: None, timeout: Duration::ZERO };
    match decode_pipelined(&ens, &[3], 10, &opts) {
        Ok((out, _)) => assert_eq!(out, reference),
        Err(Error::DecodeAborted { partial, tokens_emitted, reason }) => {
            assert_eq!(partial.len(), tokens_emitted);
            assert_eq!(&reference.tokens[..partial.len()], &partial[..]);
            assert!(reason.contains("deadlock"), "{reason}");
        }
        Err(other) => panic!("unexpected error {other}"),
    }
}
