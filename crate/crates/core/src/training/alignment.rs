use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;
use crate::tasks::Example;
use crate::training::chain::{batch_eval, GradTerm, StageInputs, TrainConfig};
use crate::transformer::Transformer;

/// Worst-case alignment between suppression and cross-entropy gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEstimate {
    /// `max −cos(g_s, g_ce)`, clamped to `[0, 1)`.
    pub rho: f64,
    /// `max ‖g_s‖ / ‖g_ce‖`.
    pub gamma: f64,
    pub sample_count: usize,
}

pub(crate) fn flat<T: Scalar>(tensors: &[&Tensor<T>]) -> Vec<T> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn norm<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// `‖g1 − g0‖ / ‖x1 − x0‖`, or `None` when the points coincide.
pub fn secant_smoothness<T: Scalar>(x0: &[T], g0: &[T], x1: &[T], g1: &[T]) -> Option<T> {
    let dx: Vec<T> = x1.iter().zip(x0).map(|(&a, &b)| a - b).collect();
    let dg: Vec<T> = g1.iter().zip(g0).map(|(&a, &b)| a - b).collect();
    let n = norm(&dx);
    (n > T::zero()).then(|| norm(&dg) / n)
}

/// Reduces per-sample `(g_s, g_ce)` pairs to the worst-case estimate.
/// Samples with `‖g_ce‖ = 0` are skipped; `g_s = 0` contributes nothing.
pub fn alignment_from_pairs<T: Scalar>(pairs: &[(Vec<T>, Vec<T>)]) -> AlignmentEstimate {
    let (mut rho, mut gamma, mut count) = (0.0f64, 0.0f64, 0usize);
    for (gs, gce) in pairs {
        let nce = norm(gce).as_f64();
        if nce == 0.0 {
            continue;
        }
        count += 1;
        let ns = norm(gs).as_f64();
        if ns == 0.0 {
            continue;
        }
        let dot: f64 = gs.iter().zip(gce).map(|(&a, &b)| (a * b).as_f64()).sum();
        rho = rho.max(-dot / (ns * nce));
        gamma = gamma.max(ns / nce);
    }
    AlignmentEstimate { rho: rho.clamp(0.0, 1.0 - f64::EPSILON), gamma, sample_count: count }
}

/// Per-sequence suppression and cross-entropy gradients over the trainable
/// parameters, reduced to `(ρ̂, Γ̂)`.
pub fn estimate_alignment<T: Scalar>(
    model: &Transformer<T>,
    data: &[Example],
    inputs: &StageInputs<T>,
    samples: &[usize],
    cfg: &TrainConfig,
) -> Result<AlignmentEstimate> {
    if !samples.iter().any(|&i| inputs.errors[i].iter().any(Option::is_some)) {
        return Err(Error::EmptyEstimate);
    }
    let beta = T::of(cfg.beta);
    let mut pairs = Vec::with_capacity(samples.len());
    for &i in samples {
        let gs = batch_eval(model, data, inputs, &[i], GradTerm::Suppression { beta })?;
        let gce = batch_eval(model, data, inputs, &[i], GradTerm::CrossEntropy)?;
        pairs.push((flat(&gs.grads.trainable()), flat(&gce.grads.trainable())));
    }
    Ok(alignment_from_pairs(&pairs))
}

/// Learning-rate ceiling `2(α − ρΓ) / (L (α + Γ)²)` for guaranteed descent of the
/// cross-entropy term.
pub fn descent_lr_bound(alpha: f64, rho: f64, gamma: f64, smoothness: f64) -> Result<f64> {
    if !(alpha > rho * gamma) {
        return Err(Error::BoundViolated { alpha, rho_gamma: rho * gamma });
    }
    if !(smoothness > 0.0) {
        return Err(Error::Range(format!("smoothness constant must be positive, got {smoothness}")));
    }
    Ok(2.0 * (alpha - rho * gamma) / (smoothness * (alpha + gamma).powi(2)))
}
