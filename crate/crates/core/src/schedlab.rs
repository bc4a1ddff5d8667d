//! Latency model of layer-pipelined chains on a k×l model-by-layer grid:
//! closed form, sequential baseline and a list-scheduling simulator.

use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};

/// Time values the model is evaluated in; integer and rational types keep it exact.
pub trait SchedTime:
    Copy + PartialEq + PartialOrd + Add<Output = Self> + Mul<Output = Self> + Zero + fmt::Debug + fmt::Display + ToPrimitive
{
    fn count(n: usize) -> Self;
}

impl SchedTime for u64 {
    fn count(n: usize) -> Self {
        n as u64
    }
}

impl SchedTime for i64 {
    fn count(n: usize) -> Self {
        n as i64
    }
}

impl SchedTime for f64 {
    fn count(n: usize) -> Self {
        n as f64
    }
}

impl SchedTime for Ratio<i64> {
    fn count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
}

fn max_t<C: SchedTime>(a: C, b: C) -> C {
    if b > a {
        b
    } else {
        a
    }
}

/// `k` models of `l` layers on `g` processors, per-layer cost `c`, one-off overhead `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedProblem<C> {
    pub k: usize,
    pub l: usize,
    pub g: usize,
    pub c: C,
    pub delta: C,
}

impl<C: SchedTime> SchedProblem<C> {
    pub fn new(k: usize, l: usize, g: usize, c: C, delta: C) -> Result<Self> {
        let p = SchedProblem { k, l, g, c, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.g == 0 {
            return Err(Error::Config(format!("k, l, g must be positive (k={} l={} g={})", self.k, self.l, self.g)));
        }
        if !(self.c > C::zero()) {
            return Err(Error::Config(format!("per-layer cost must be positive, got {}", self.c)));
        }
        if self.delta < C::zero() {
            return Err(Error::Config(format!("overhead must be nonnegative, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Tasks on anti-diagonal `s` (cells with model + layer = s, both 1-based).
pub fn antidiagonal_width(k: usize, l: usize, s: usize) -> Result<usize> {
    if s < 2 || s > k + l {
        return Err(Error::Range(format!("anti-diagonal {s} outside 2..={}", k + l)));
    }
    Ok(k.min(s - 1) + 1 - 1usize.max(s.saturating_sub(l)))
}

/// `(n + 1) · L · c`.
pub fn t_sequential<C: SchedTime>(n_successors: usize, n_layers: usize, c: C) -> C {
    C::count((n_successors + 1) * n_layers) * c
}

/// `2c Σ_{t<w} ⌈t/g⌉ + (u − w + 1) c ⌈w/g⌉ + δ` with `w = min(k,l)`, `u = max(k,l)`.
pub fn t_parallel_closed<C: SchedTime>(p: &SchedProblem<C>) -> C {
    let w = p.k.min(p.l);
    let u = p.k.max(p.l);
    let ramp: usize = (1..w).map(|t| t.div_ceil(p.g)).sum();
    C::count(2 * ramp) * p.c + C::count((u - w + 1) * w.div_ceil(p.g)) * p.c + p.delta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskRun<C> {
    /// 1-based model and layer.
    pub model: usize,
    pub layer: usize,
    pub processor: usize,
    pub start: C,
    pub finish: C,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<C> {
    pub makespan: C,
    pub tasks: Vec<TaskRun<C>>,
}

/// Event-driven list schedule. Each anti-diagonal's tasks are dealt round-robin
/// to processors starting from processor 0; a processor runs its queue in
/// order, each task starting once its model and layer predecessors finish.
pub fn simulate_schedule<C: SchedTime>(p: &SchedProblem<C>) -> Schedule<C> {
    let (k, l) = (p.k, p.l);
    let mut queues: Vec<Vec<(usize, usize)>> = vec![Vec::new(); p.g];
    for s in 2..=k + l {
        let lo = 1usize.max(s.saturating_sub(l));
        for (j, m) in (lo..=k.min(s - 1)).enumerate() {
            queues[j % p.g].push((m, s - m));
        }
    }
    let mut finish: Vec<Option<C>> = vec![None; (k + 1) * (l + 1)];
    let at = |m: usize, i: usize| m * (l + 1) + i;
    let mut head = vec![0usize; p.g];
    let mut free = vec![C::zero(); p.g];
    let mut tasks = Vec::with_capacity(k * l);
    // repeatedly start the ready queue head with the earliest start time
    while tasks.len() < k * l {
        let mut best: Option<(C, usize)> = None;
        for q in 0..p.g {
            let Some(&(m, i)) = queues[q].get(head[q]) else { continue };
            let dep = |mm: usize, ii: usize| if mm == 0 || ii == 0 { Some(C::zero()) } else { finish[at(mm, ii)] };
            let (Some(a), Some(b)) = (dep(m - 1, i), dep(m, i - 1)) else { continue };
            let start = max_t(free[q], max_t(a, b));
            if best.is_none_or(|(t, _)| start < t) {
                best = Some((start, q));
            }
        }
        let (start, q) = best.expect("grid schedule always has a ready task");
        let (m, i) = queues[q][head[q]];
        head[q] += 1;
        let end = start + p.c;
        free[q] = end;
        finish[at(m, i)] = Some(end);
        tasks.push(TaskRun { model: m, layer: i, processor: q, start, finish: end });
    }
    let last = tasks.iter().fold(C::zero(), |acc, t| max_t(acc, t.finish));
    Schedule { makespan: last + p.delta, tasks }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow<C> {
    pub k: usize,
    pub l: usize,
    pub g: usize,
    pub t_seq: C,
    pub t_par_closed: C,
    pub t_par_sim: C,
    pub speedup: f64,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

impl Span {
    pub fn iter(self) -> impl Iterator<Item = usize> {
        self.lo..=self.hi
    }
}

impl FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("range '{s}' is not of the form a..b or a"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v = s.trim().parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if lo == 0 || lo > hi {
            return Err(Error::Parse(format!("range '{s}' must be nonempty and start at 1 or more")));
        }
        Ok(Span { lo, hi })
    }
}

/// Parsed `k=1..6 l=1..12 g=1..4 c=1 delta=0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub k: Span,
    pub l: Span,
    pub g: Span,
    pub c: Ratio<i64>,
    pub delta: Ratio<i64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            k: Span { lo: 1, hi: 6 },
            l: Span { lo: 1, hi: 12 },
            g: Span { lo: 1, hi: 4 },
            c: Ratio::from_integer(1),
            delta: Ratio::from_integer(0),
        }
    }
}

/// Exact rational from `3`, `-2`, `1/2` or a decimal like `0.0009`.
pub fn parse_rational(s: &str) -> Result<Ratio<i64>> {
    let bad = || Error::Parse(format!("'{s}' is not a number"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let (a, b): (i64, i64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(a, b));
    }
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 15 {
        return Err(bad());
    }
    let den = 10i64.pow(frac.len() as u32);
    let whole: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let part: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let num = whole.checked_mul(den).and_then(|w| w.checked_add(part)).ok_or_else(bad)?;
    Ok(Ratio::new(if neg { -num } else { num }, den))
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        for tok in s.split_whitespace() {
            let (key, val) =
                tok.split_once('=').ok_or_else(|| Error::Parse(format!("expected key=value, got '{tok}'")))?;
            match key {
                "k" => spec.k = val.parse()?,
                "l" => spec.l = val.parse()?,
                "g" => spec.g = val.parse()?,
                "c" => spec.c = parse_rational(val)?,
                "delta" => spec.delta = parse_rational(val)?,
                other => return Err(Error::Parse(format!("unknown key '{other}' (k, l, g, c, delta)"))),
            }
        }
        SchedProblem::new(1, 1, 1, spec.c, spec.delta).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(spec)
    }
}

pub fn speedup_table<C: SchedTime>(k: Span, l: Span, g: Span, c: C, delta: C) -> Result<Vec<SpeedupRow<C>>> {
    let mut rows = Vec::new();
    for kk in k.iter() {
        for ll in l.iter() {
            for gg in g.iter() {
                let p = SchedProblem::new(kk, ll, gg, c, delta)?;
                let t_seq = t_sequential(kk - 1, ll, c);
                let closed = t_parallel_closed(&p);
                let sim = simulate_schedule(&p).makespan;
                let speedup = t_seq.to_f64().unwrap_or(f64::NAN) / closed.to_f64().unwrap_or(f64::NAN);
                rows.push(SpeedupRow { k: kk, l: ll, g: gg, t_seq, t_par_closed: closed, t_par_sim: sim, speedup });
            }
        }
    }
    Ok(rows)
}
