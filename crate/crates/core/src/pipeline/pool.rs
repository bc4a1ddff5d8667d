use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Address of one published hidden state: model, layer (0 = embedding) and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HiddenKey {
    pub model: usize,
    pub layer: usize,
    pub step: usize,
}

impl HiddenKey {
    pub fn new(model: usize, layer: usize, step: usize) -> Self {
        HiddenKey { model, layer, step }
    }
}

impl fmt::Display for HiddenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h(model={}, layer={}, step={})", self.model, self.layer, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Hidden(HiddenKey),
    Logits { model: usize, step: usize },
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Hidden(k) => k.fmt(f),
            Slot::Logits { model, step } => write!(f, "logits(model={model}, step={step})"),
        }
    }
}

struct Inner<T> {
    values: HashMap<Slot, (Tensor<T>, Instant)>,
    consumed: HashSet<Slot>,
    aborted: Option<String>,
}

/// A value handed over by [`StatePool::take`], with hand-off timestamps.
#[derive(Debug, Clone)]
pub struct Handoff<T> {
    pub value: Tensor<T>,
    /// When the producer stored the value.
    pub put_at: Instant,
    /// When the consumer started waiting.
    pub enter_at: Instant,
    /// When the consumer got the value.
    pub exit_at: Instant,
}

impl<T> Handoff<T> {
    /// Time spent waiting for the producer.
    pub fn blocked(&self) -> Duration {
        self.put_at.saturating_duration_since(self.enter_at).min(self.exit_at - self.enter_at)
    }

    /// Hand-off cost once the value existed: `exit − max(enter, put)`.
    pub fn overhead(&self) -> Duration {
        self.exit_at.saturating_duration_since(self.enter_at.max(self.put_at))
    }
}

/// Thread-safe write-once store of hidden states and per-step logits.
pub struct StatePool<T> {
    inner: Mutex<Inner<T>>,
    ready: Condvar,
}

impl<T: Clone> Default for StatePool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> StatePool<T> {
    pub fn new() -> Self {
        StatePool {
            inner: Mutex::new(Inner { values: HashMap::new(), consumed: HashSet::new(), aborted: None }),
            ready: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner<T>> {
        // a panicking holder cannot leave the maps half-updated
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn store(&self, slot: Slot, value: Tensor<T>) -> Result<()> {
        let mut g = self.lock();
        if g.values.contains_key(&slot) || g.consumed.contains(&slot) {
            return Err(Error::DuplicateWrite(slot.to_string()));
        }
        g.values.insert(slot, (value, Instant::now()));
        drop(g);
        self.ready.notify_all();
        Ok(())
    }

    fn wait(&self, slot: Slot, timeout: Duration, remove: bool) -> Result<Handoff<T>> {
        let enter_at = Instant::now();
        let deadline = enter_at + timeout;
        let mut g = self.lock();
        loop {
            if let Some(reason) = &g.aborted {
                return Err(Error::DecodeAborted { reason: reason.clone(), tokens_emitted: 0, partial: Vec::new() });
            }
            if g.values.contains_key(&slot) {
                let (value, put_at) = if remove {
                    g.consumed.insert(slot);
                    g.values.remove(&slot).expect("present")
                } else {
                    g.values[&slot].clone()
                };
                return Ok(Handoff { value, put_at, enter_at, exit_at: Instant::now() });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::deadlock(&slot, timeout.as_millis() as u64));
            }
            g = self.ready.wait_timeout(g, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    /// Stores a hidden state; a second write to the same key is an error.
    pub fn put(&self, key: HiddenKey, value: Tensor<T>) -> Result<()> {
        self.store(Slot::Hidden(key), value)
    }

    /// Blocks until `key` is written, leaving it in the pool.
    pub fn get(&self, key: HiddenKey, timeout: Duration) -> Result<Tensor<T>> {
        self.wait(Slot::Hidden(key), timeout, false).map(|h| h.value)
    }

    /// Blocks until `key` is written and removes it.
    pub fn take(&self, key: HiddenKey, timeout: Duration) -> Result<Handoff<T>> {
        self.wait(Slot::Hidden(key), timeout, true)
    }

    pub fn put_logits(&self, model: usize, step: usize, value: Tensor<T>) -> Result<()> {
        self.store(Slot::Logits { model, step }, value)
    }

    pub fn take_logits(&self, model: usize, step: usize, timeout: Duration) -> Result<Tensor<T>> {
        self.wait(Slot::Logits { model, step }, timeout, true).map(|h| h.value)
    }

    /// Fails every current and future wait with `reason`.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut g = self.lock();
        g.aborted.get_or_insert_with(|| reason.into());
        drop(g);
        self.ready.notify_all();
    }

    pub fn abort_reason(&self) -> Option<String> {
        self.lock().aborted.clone()
    }

    /// Values written but not yet taken.
    pub fn pending(&self) -> usize {
        self.lock().values.len()
    }
}
