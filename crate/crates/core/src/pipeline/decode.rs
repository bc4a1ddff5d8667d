use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::pipeline::pool::{HiddenKey, StatePool};
use crate::scalar::Scalar;
use crate::tasks::eos;
use crate::transformer::StepOutput;

/// Tokens produced by a greedy ensemble decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput<T> {
    /// Generated tokens, excluding the prompt.
    pub tokens: Vec<usize>,
    /// Fused logits that produced each generated token.
    pub fused_logits: Vec<Tensor<T>>,
}

fn check_prompt<T: Scalar>(ens: &Ensemble<T>, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt is empty".into()));
    }
    if prompt.len() > ens.max_steps() {
        return Err(Error::Range(format!("prompt length {} exceeds max_steps {}", prompt.len(), ens.max_steps())));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= ens.vocab()) {
        return Err(Error::Range(format!("prompt token {bad} >= vocab {}", ens.vocab())));
    }
    Ok(())
}

/// Shared stepping rule: given step `t` and its fused logits, the token for
/// step `t + 1`, or `None` to stop. Generated tokens are pushed to `out`.
fn next_token<T: Scalar>(
    prompt: &[usize],
    t: usize,
    fused: Tensor<T>,
    max_tokens: usize,
    max_steps: usize,
    vocab: usize,
    out: &mut DecodeOutput<T>,
) -> Option<usize> {
    if t + 1 < prompt.len() {
        return Some(prompt[t + 1]);
    }
    let tok = fused.argmax();
    out.tokens.push(tok);
    out.fused_logits.push(fused);
    let done = tok == eos(vocab) || out.tokens.len() >= max_tokens || t + 1 >= max_steps;
    (!done).then_some(tok)
}

/// Reference decode: per step every model runs to completion in chain order,
/// then the logits are fused and the argmax (lowest index on ties) is emitted.
pub fn decode_sequential<T: Scalar>(ens: &Ensemble<T>, prompt: &[usize], max_tokens: usize) -> Result<DecodeOutput<T>> {
    check_prompt(ens, prompt)?;
    let mut out = DecodeOutput { tokens: Vec::new(), fused_logits: Vec::new() };
    if max_tokens == 0 {
        return Ok(out);
    }
    let mut caches: Vec<_> = ens.models.iter().map(|m| m.new_cache()).collect();
    let mut token = prompt[0];
    for t in 0.. {
        let mut prev: Option<StepOutput<T>> = None;
        let mut logits = Vec::with_capacity(ens.len());
        for (i, (model, cache)) in ens.models.iter().zip(caches.iter_mut()).enumerate() {
            let fusion = match &prev {
                Some(p) => ens.step_fusion(i, &p.layer_states)?,
                None => None,
            };
            let mut cursor = model.begin_step(cache, token)?;
            while !cursor.is_done() {
                let l = cursor.next_layer();
                cursor.advance(fusion.as_ref().and_then(|f| f.get(&l)))?;
            }
            let step = cursor.finish()?;
            logits.push(step.logits.clone());
            prev = Some(step);
        }
        let fused = ens.fuse(&logits)?;
        match next_token(prompt, t, fused, max_tokens, ens.max_steps(), ens.vocab(), &mut out) {
            Some(next) => token = next,
            None => break,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Executor threads; models are assigned round-robin. `None` gives one per model.
    pub executors: Option<usize>,
    /// Longest wait for a hidden state or logits before reporting deadlock.
    pub timeout: Duration,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { executors: None, timeout: Duration::from_secs(5) }
    }
}

/// Start and finish of one layer of one model at one step, in µs since decode start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub model: usize,
    pub layer: usize,
    pub step: usize,
    pub start_us: f64,
    pub finish_us: f64,
    /// When the predecessor state this layer consumed was published, if any.
    pub input_ready_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub wall_us: f64,
    pub per_token_us: f64,
    /// Total time workers spent waiting for predecessor states.
    pub blocked_us: f64,
    /// Total hand-off cost of hidden states once available.
    pub state_passing_us: f64,
    pub executors: usize,
    pub layers: Vec<LayerTiming>,
}

enum Command {
    Step(usize),
    Stop,
}

struct WorkerLog {
    layers: Vec<LayerTiming>,
    blocked: Duration,
    overhead: Duration,
}

/// Layers of `model` whose state a successor consumes.
fn published_layers<T: Scalar>(ens: &Ensemble<T>, model: usize) -> BTreeSet<usize> {
    if !ens.fusion || model + 1 >= ens.len() {
        return BTreeSet::new();
    }
    ens.models[model + 1].spec().fusion_layers().into_iter().map(|l| l - 1).collect()
}

fn run_worker<T: Scalar>(
    ens: &Ensemble<T>,
    owned: &[usize],
    pool: &StatePool<T>,
    rx: mpsc::Receiver<Command>,
    origin: Instant,
    timeout: Duration,
) -> Result<WorkerLog> {
    let us = |at: Instant| at.saturating_duration_since(origin).as_secs_f64() * 1e6;
    let mut caches: Vec<_> = owned.iter().map(|&i| ens.models[i].new_cache()).collect();
    let publish: Vec<BTreeSet<usize>> = owned.iter().map(|&i| published_layers(ens, i)).collect();
    let mut log = WorkerLog { layers: Vec::new(), blocked: Duration::ZERO, overhead: Duration::ZERO };
    for t in 0.. {
        let token = match rx.recv() {
            Ok(Command::Step(tok)) => tok,
            Ok(Command::Stop) | Err(_) => break,
        };
        for (slot, &i) in owned.iter().enumerate() {
            let model = &ens.models[i];
            let fused = ens.fusion && i > 0;
            let mut cursor = model.begin_step(&mut caches[slot], token)?;
            if publish[slot].contains(&0) {
                pool.put(HiddenKey::new(i, 0, t), cursor.current().clone())?;
            }
            while !cursor.is_done() {
                let l = cursor.next_layer();
                let mut ready = None;
                let pred = if fused && model.spec().is_fusion_layer(l) {
                    let h = pool.take(HiddenKey::new(i - 1, l - 1, t), timeout)?;
                    log.blocked += h.blocked();
                    log.overhead += h.overhead();
                    ready = Some(us(h.put_at));
                    Some(h.value)
                } else {
                    None
                };
                let start = Instant::now();
                let state = cursor.advance(pred.as_ref())?;
                if publish[slot].contains(&l) {
                    pool.put(HiddenKey::new(i, l, t), state.clone())?;
                }
                log.layers.push(LayerTiming {
                    model: i,
                    layer: l,
                    step: t,
                    start_us: us(start),
                    finish_us: us(Instant::now()),
                    input_ready_us: ready,
                });
            }
            let out = cursor.finish()?;
            pool.put_logits(i, t, out.logits)?;
        }
    }
    Ok(log)
}

/// Layer-pipelined decode: one worker per executor streams hidden states to its
/// successors through a shared pool; the caller fuses logits and broadcasts
/// each step's token. Output matches [`decode_sequential`] exactly.
pub fn decode_pipelined<T: Scalar>(
    ens: &Ensemble<T>,
    prompt: &[usize],
    max_tokens: usize,
    opts: &PipelineOptions,
) -> Result<(DecodeOutput<T>, TimingReport)> {
    check_prompt(ens, prompt)?;
    let executors = opts.executors.unwrap_or(ens.len()).clamp(1, ens.len());
    let mut out = DecodeOutput { tokens: Vec::new(), fused_logits: Vec::new() };
    let origin = Instant::now();
    if max_tokens == 0 {
        let report = TimingReport {
            wall_us: 0.0,
            per_token_us: 0.0,
            blocked_us: 0.0,
            state_passing_us: 0.0,
            executors,
            layers: Vec::new(),
        };
        return Ok((out, report));
    }
    let pool = StatePool::new();
    let assignment: Vec<Vec<usize>> =
        (0..executors).map(|e| (0..ens.len()).filter(|i| i % executors == e).collect()).collect();

    let (result, logs) = thread::scope(|s| {
        let mut senders = Vec::with_capacity(executors);
        let mut handles = Vec::with_capacity(executors);
        for owned in &assignment {
            let (tx, rx) = mpsc::channel();
            senders.push(tx);
            let pool = &pool;
            handles.push(s.spawn(move || {
                let res = catch_unwind(AssertUnwindSafe(|| run_worker(ens, owned, pool, rx, origin, opts.timeout)));
                let res = res.unwrap_or_else(|_| Err(Error::Contract(format!("worker for models {owned:?} panicked"))));
                if let Err(e) = &res {
                    pool.abort(e.to_string());
                }
                res
            }));
        }
        let broadcast = |cmd: fn(usize) -> Command, tok: usize| {
            for tx in &senders {
                // a dead worker has already aborted the pool
                let _ = tx.send(cmd(tok));
            }
        };
        let mut token = prompt[0];
        let result: Result<()> = (|| {
            for t in 0.. {
                broadcast(Command::Step, token);
                let logits = (0..ens.len())
                    .map(|i| pool.take_logits(i, t, opts.timeout))
                    .collect::<Result<Vec<_>>>()?;
                let fused = ens.fuse(&logits)?;
                match next_token(prompt, t, fused, max_tokens, ens.max_steps(), ens.vocab(), &mut out) {
                    Some(next) => token = next,
                    None => return Ok(()),
                }
            }
            Ok(())
        })();
        if let Err(e) = &result {
            pool.abort(e.to_string());
        }
        broadcast(|_| Command::Stop, 0);
        let logs: Vec<Result<WorkerLog>> = handles.into_iter().map(|h| h.join().expect("worker caught its panic")).collect();
        (result, logs)
    });
    let wall = origin.elapsed();

    let mut first_err = result.err();
    let mut layers = Vec::new();
    let (mut blocked, mut overhead) = (Duration::ZERO, Duration::ZERO);
    for log in logs {
        match log {
            Ok(l) => {
                layers.extend(l.layers);
                blocked += l.blocked;
                overhead += l.overhead;
            }
            Err(e) => {
                // the root cause beats the abort it triggered elsewhere
                if first_err.as_ref().is_none_or(|f| matches!(f, Error::DecodeAborted { .. })) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        let reason = match e {
            Error::DecodeAborted { reason, .. } => reason,
            other => other.to_string(),
        };
        return Err(Error::DecodeAborted { reason, tokens_emitted: out.tokens.len(), partial: out.tokens });
    }
    if pool.pending() != 0 {
        return Err(Error::Contract(format!("{} hidden states were published but never consumed", pool.pending())));
    }
    layers.sort_by(|a, b| (a.step, a.model, a.layer).cmp(&(b.step, b.model, b.layer)));
    let wall_us = wall.as_secs_f64() * 1e6;
    let report = TimingReport {
        wall_us,
        per_token_us: wall_us / out.tokens.len().max(1) as f64,
        blocked_us: blocked.as_secs_f64() * 1e6,
        state_passing_us: overhead.as_secs_f64() * 1e6,
        executors,
        layers,
    };
    Ok((out, report))
}
