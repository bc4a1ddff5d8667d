//! Empirical checks of the boosting theory: the effective contribution of a
//! new model, the quadratic softmax remainder, the MSE change under a λ sweep
//! and guaranteed descent of cross-entropy under the composite loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::{topk_mask, Ensemble};
use crate::error::{Error, Result};
use crate::numkit::{softmax, softmax_jacobian, Tensor};
use crate::scalar::Scalar;
use crate::tasks::Example;
use crate::training::{batch_eval, chain_traces, descent_lr_bound, flat, secant_smoothness, GradTerm, StageInputs};
use crate::transformer::{seeded_rng, Transformer};

/// `J_softmax(z_prev) · z_new`: first-order effect of adding `z_new` on the probabilities.
pub fn effective_contribution<T: Scalar>(z_prev: &Tensor<T>, z_new: &Tensor<T>) -> Result<Tensor<T>> {
    let v = z_prev.expect_vector("accumulated logits")?;
    if z_new.shape() != [v] {
        return Err(Error::Shape(format!("new logits {:?} vs accumulated [{v}]", z_new.shape())));
    }
    let j = softmax_jacobian(z_prev)?;
    Ok(Tensor::vector((0..v).map(|i| crate::numkit::dot(j.row(i), z_new.data())).collect()))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemainderFit {
    /// Least-squares slope of `log ‖R‖` against `log s`.
    pub exponent: f64,
    /// `exp(intercept)` of that fit.
    pub intercept_c: f64,
    /// Smallest `C` with `‖R‖ ≤ C s²` on every sample.
    pub c_fit: f64,
    /// `(s, ‖R‖)` per sample.
    pub samples: Vec<(f64, f64)>,
}

impl RemainderFit {
    pub fn envelope_holds(&self) -> bool {
        self.samples.iter().all(|&(s, r)| r <= self.c_fit * s * s * (1.0 + 1e-12))
    }
}

/// `softmax(z + Δz) − softmax(z) − J(z)·Δz`.
pub fn softmax_remainder(z: &Tensor<f64>, dz: &Tensor<f64>) -> Result<Tensor<f64>> {
    let v = z.expect_vector("base logits")?;
    if dz.shape() != [v] {
        return Err(Error::Shape(format!("perturbation {:?} vs logits [{v}]", dz.shape())));
    }
    let linear = effective_contribution(z, dz)?;
    let moved = softmax(&z.add(dz)?)?;
    let p0 = softmax(z)?;
    Ok(Tensor::vector((0..v).map(|i| moved.data()[i] - p0.data()[i] - linear.data()[i]).collect()))
}

/// `R(s·d) = softmax(z + s·d) − softmax(z) − J(z)(s·d)` for random unit
/// directions `d`, fitted as a power law in `s`.
pub fn remainder_probe(z: &Tensor<f64>, scales: &[f64], directions: usize, seed: u64) -> Result<RemainderFit> {
    let v = z.expect_vector("base logits")?;
    if scales.len() < 3 {
        return Err(Error::Contract(format!("need at least 3 scales for a fit, got {}", scales.len())));
    }
    let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scales.iter().copied().fold(0.0, f64::max);
    if !(lo > 0.0) || hi / lo < 100.0 {
        return Err(Error::Contract(format!("scales must be positive and span two decades, got {lo:e}..{hi:e}")));
    }
    if directions == 0 {
        return Err(Error::Contract("need at least one direction".into()));
    }
    let p0 = softmax(z)?;
    let j = softmax_jacobian(z)?;
    let mut rng = seeded_rng(seed);
    let mut samples = Vec::with_capacity(scales.len() * directions);
    for _ in 0..directions {
        let mut d: Vec<f64> = (0..v).map(|_| rng.sample(StandardNormal)).collect();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= n);
        let jd: Vec<f64> = (0..v).map(|i| crate::numkit::dot(j.row(i), &d)).collect();
        for &s in scales {
            let zs = Tensor::vector(z.data().iter().zip(&d).map(|(a, b)| a + s * b).collect());
            let ps = softmax(&zs)?;
            let r: f64 = (0..v).map(|i| ps.data()[i] - p0.data()[i] - s * jd[i]).map(|x| x * x).sum::<f64>().sqrt();
            samples.push((s, r));
        }
    }
    let fit: Vec<&(f64, f64)> = samples.iter().filter(|(_, r)| *r > 0.0).collect();
    if fit.len() < 3 {
        return Err(Error::Contract("remainder vanished at almost every sample; nothing to fit".into()));
    }
    let xs: Vec<f64> = fit.iter().map(|(s, _)| s.ln()).collect();
    let ys: Vec<f64> = fit.iter().map(|(_, r)| r.ln()).collect();
    let (exponent, intercept) = least_squares_slope(&xs, &ys);
    let c_fit = samples.iter().map(|&(s, r)| r / (s * s)).fold(0.0, f64::max);
    Ok(RemainderFit { exponent, intercept_c: intercept.exp(), c_fit, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsePoint {
    pub lambda: f64,
    pub mse: f64,
    pub delta_mse: f64,
    /// `−2λ · mean(e·g)`.
    pub linear_prediction: f64,
    pub residual: f64,
    pub per_dim_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseSweepReport {
    pub predecessor_mse: f64,
    pub predecessor_per_dim: Vec<f64>,
    /// `mean(e·g)` over instances and vocabulary entries.
    pub mean_eg: f64,
    pub points: Vec<MsePoint>,
    /// Smallest and largest grid λ of the first run with `ΔMSE < 0`.
    pub working_range: Option<(f64, f64)>,
}

impl MseSweepReport {
    /// Least-squares log-log slope of `|residual|` against λ.
    pub fn residual_order(&self) -> f64 {
        let pts: Vec<&MsePoint> = self.points.iter().filter(|p| p.residual != 0.0).collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.lambda.ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.residual.abs().ln()).collect();
        least_squares_slope(&xs, &ys).0
    }
}

/// Mean and per-dimension squared error of `p` against one-hot `gold`.
fn mse_of(ps: &[Vec<f64>], gold: &[usize]) -> (f64, Vec<f64>) {
    let v = ps[0].len();
    let mut per_dim = vec![0.0; v];
    for (p, &g) in ps.iter().zip(gold) {
        for (i, (&pi, acc)) in p.iter().zip(per_dim.iter_mut()).enumerate() {
            let y = if i == g { 1.0 } else { 0.0 };
            *acc += (pi - y) * (pi - y);
        }
    }
    let n = ps.len() as f64;
    per_dim.iter_mut().for_each(|x| *x /= n);
    (per_dim.iter().sum::<f64>() / v as f64, per_dim)
}

/// Probability-space MSE of `softmax(z_prev + λ z_new)` over a λ grid, against
/// the predecessor alone and the first-order prediction.
pub fn mse_sweep<T: Scalar>(
    z_prev: &[Tensor<T>],
    z_new: &[Tensor<T>],
    gold: &[usize],
    lambdas: &[f64],
) -> Result<MseSweepReport> {
    if z_prev.is_empty() || lambdas.is_empty() {
        return Err(Error::Contract("mse sweep needs instances and a λ grid".into()));
    }
    if z_prev.len() != z_new.len() || z_prev.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predecessor, {} corrector and {} gold entries",
            z_prev.len(),
            z_new.len(),
            gold.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Range(format!("λ grid must be positive, found {l}")));
    }
    let prev: Vec<Tensor<f64>> = z_prev.iter().map(|z| z.cast()).collect();
    let new: Vec<Tensor<f64>> = z_new.iter().map(|z| z.cast()).collect();
    let v = prev[0].len();
    let p_prev: Vec<Vec<f64>> = prev.iter().map(|z| softmax(z).map(|p| p.into_data())).collect::<Result<_>>()?;
    let (base_mse, base_dim) = mse_of(&p_prev, gold);
    let mut eg = 0.0;
    for ((zp, zn), (p, &y)) in prev.iter().zip(&new).zip(p_prev.iter().zip(gold)) {
        let g = effective_contribution(zp, zn)?;
        for (i, (&gi, &pi)) in g.data().iter().zip(p).enumerate() {
            let e = if i == y { 1.0 } else { 0.0 } - pi;
            eg += e * gi;
        }
    }
    let mean_eg = eg / (prev.len() * v) as f64;
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let ps: Vec<Vec<f64>> = prev
            .iter()
            .zip(&new)
            .map(|(a, b)| softmax(&Tensor::vector(a.data().iter().zip(b.data()).map(|(x, y)| x + lambda * y).collect())).map(|p| p.into_data()))
            .collect::<Result<_>>()?;
        let (mse, per_dim) = mse_of(&ps, gold);
        let delta = mse - base_mse;
        let linear = -2.0 * lambda * mean_eg;
        points.push(MsePoint { lambda, mse, delta_mse: delta, linear_prediction: linear, residual: delta - linear, per_dim_mse: per_dim });
    }
    let mut working_range = None;
    for p in &points {
        match (&mut working_range, p.delta_mse < 0.0) {
            (None, true) => working_range = Some((p.lambda, p.lambda)),
            (Some((_, hi)), true) => *hi = p.lambda,
            (Some(_), false) => break,
            (None, false) => {}
        }
    }
    Ok(MseSweepReport { predecessor_mse: base_mse, predecessor_per_dim: base_dim, mean_eg, points, working_range })
}

/// Held-out inputs for [`mse_sweep`] from a chain: per supervised position, the
/// fused logits of every model but the last, the last model's top-k masked
/// logits (what fusion adds, before λ) and the gold token.
pub fn chain_mse_inputs<T: Scalar>(
    ens: &Ensemble<T>,
    data: &[Example],
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, Vec<usize>)> {
    if ens.len() < 2 {
        return Err(Error::Contract("an MSE sweep needs at least one successor".into()));
    }
    let head = ens.prefix(ens.len() - 1);
    let (mut prev, mut new, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for ex in data {
        let traces = chain_traces(ens, &ex.input)?;
        for (t, g) in ex.gold.iter().enumerate() {
            let Some(g) = *g else { continue };
            let zs: Vec<Tensor<T>> = traces.iter().map(|tr| tr.logits[t].clone()).collect();
            prev.push(head.fuse(&zs[..zs.len() - 1])?);
            new.push(topk_mask(&zs[zs.len() - 1], ens.top_k)?);
            gold.push(g);
        }
    }
    Ok((prev, new, gold))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentReport {
    /// Full-batch cross-entropy before each step and after the last.
    pub ce: Vec<f64>,
    pub violations: usize,
    pub rho: f64,
    pub gamma: f64,
    pub smoothness: f64,
    pub learning_rate: f64,
    /// `None` when the precondition α > ρ̂Γ̂ fails.
    pub bound: Option<f64>,
    /// Trajectories run while searching for the rate.
    pub rounds: usize,
}

impl DescentReport {
    pub fn precondition_holds(&self) -> bool {
        self.bound.is_some()
    }

    /// The run used a rate at most `factor` times the bound measured on it.
    pub fn within(&self, factor: f64) -> bool {
        self.bound.is_some_and(|b| self.learning_rate <= factor * b * (1.0 + 1e-12))
    }
}

struct Trajectory {
    ce: Vec<f64>,
    rho: f64,
    gamma: f64,
    smoothness: f64,
}

fn run_trajectory<T: Scalar>(
    model: &Transformer<T>,
    data: &[Example],
    inputs: &StageInputs<T>,
    alpha: f64,
    beta: f64,
    lr: f64,
    steps: usize,
) -> Result<Trajectory> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut m = model.clone();
    let (a, b) = (T::of(alpha), T::of(beta));
    let mut out = Trajectory { ce: Vec::with_capacity(steps + 1), rho: 0.0, gamma: 0.0, smoothness: 0.0 };
    let mut last: Option<(Vec<T>, Vec<T>)> = None;
    for step in 0..=steps {
        let ce_eval = batch_eval(&m, data, inputs, &idx, GradTerm::CrossEntropy)?;
        let s_eval = batch_eval(&m, data, inputs, &idx, GradTerm::Suppression { beta: b })?;
        let ce = (ce_eval.ce_sum / T::of(ce_eval.tokens.max(1) as f64)).as_f64();
        if !ce.is_finite() {
            return Err(Error::Divergence(format!("cross-entropy became {ce} at step {step}")));
        }
        out.ce.push(ce);
        let gce = flat(&ce_eval.grads.trainable());
        let gs = flat(&s_eval.grads.trainable());
        let params = flat(&m.trainable());
        let nce = gce.iter().map(|x| (*x * *x).as_f64()).sum::<f64>().sqrt();
        let ns = gs.iter().map(|x| (*x * *x).as_f64()).sum::<f64>().sqrt();
        if nce > 0.0 && ns > 0.0 {
            let dot: f64 = gs.iter().zip(&gce).map(|(x, y)| (*x * *y).as_f64()).sum();
            out.rho = out.rho.max(-dot / (ns * nce));
            out.gamma = out.gamma.max(ns / nce);
        }
        if let Some((p0, g0)) = &last {
            if let Some(l) = secant_smoothness(p0, g0, &params, &gce) {
                out.smoothness = out.smoothness.max(l.as_f64());
            }
        }
        if step == steps {
            break;
        }
        let lr_t = T::of(lr);
        for ((p, gc), gsup) in m.trainable_mut().into_iter().zip(ce_eval.grads.trainable()).zip(s_eval.grads.trainable()) {
            for ((x, &c), &s) in p.data_mut().iter_mut().zip(gc.data()).zip(gsup.data()) {
                *x -= lr_t * (a * c + s);
            }
        }
        last = Some((params, gce));
    }
    out.rho = out.rho.clamp(0.0, 1.0 - f64::EPSILON);
    Ok(out)
}

/// Bisection stops once the bracketing rates are this close (ratio).
pub const DESCENT_RATE_TOLERANCE: f64 = 0.05;

/// Full-batch descent on the composite loss with the rate tied to the bound.
///
/// `η*` depends on the trajectory it is measured on, so the rate is searched:
/// a run is admissible when its rate is at most `factor · η*` of its own
/// trajectory. Starting from `initial_lr`, a log-space bisection finds the
/// largest admissible rate (to [`DESCENT_RATE_TOLERANCE`]) and reports that
/// run's strict-decrease violations.
#[allow(clippy::too_many_arguments)]
pub fn descent_probe<T: Scalar>(
    model: &Transformer<T>,
    data: &[Example],
    inputs: &StageInputs<T>,
    alpha: f64,
    beta: f64,
    steps: usize,
    initial_lr: f64,
    factor: f64,
) -> Result<DescentReport> {
    if data.is_empty() || steps == 0 {
        return Err(Error::Contract("descent probe needs data and at least one step".into()));
    }
    const MAX_ROUNDS: usize = 16;
    let mut lr = initial_lr;
    let mut admissible: Option<DescentReport> = None;
    let mut too_fast: Option<f64> = None;
    let mut total = 0;
    for rounds in 1..=MAX_ROUNDS {
        total = rounds;
        let tr = run_trajectory(model, data, inputs, alpha, beta, lr, steps)?;
        let bound = if tr.smoothness > 0.0 { descent_lr_bound(alpha, tr.rho, tr.gamma, tr.smoothness).ok() } else { None };
        let violations = tr.ce.windows(2).filter(|w| !(w[1] < w[0])).count();
        let report = DescentReport {
            violations,
            rho: tr.rho,
            gamma: tr.gamma,
            smoothness: tr.smoothness,
            learning_rate: lr,
            bound,
            rounds,
            ce: tr.ce,
        };
        let Some(b) = bound else { return Ok(report) };
        let target = factor * b;
        if lr <= target * (1.0 + 1e-12) {
            admissible = Some(report);
            match too_fast {
                Some(hi) => lr = (lr * hi).sqrt(),
                // no overshoot seen yet: jump straight to the rate this run allows
                None if target > lr * (1.0 + DESCENT_RATE_TOLERANCE) => lr = target,
                None => break,
            }
        } else {
            too_fast = Some(lr);
            lr = match &admissible {
                Some(lo) => (lo.learning_rate * lr).sqrt(),
                None => target,
            };
        }
        if let (Some(lo), Some(hi)) = (&admissible, too_fast) {
            if hi / lo.learning_rate <= 1.0 + DESCENT_RATE_TOLERANCE {
                break;
            }
        }
    }
    let mut report =
        admissible.ok_or_else(|| Error::Divergence("no rate at or below the measured descent bound was found".into()))?;
    report.rounds = total;
    Ok(report)
}
