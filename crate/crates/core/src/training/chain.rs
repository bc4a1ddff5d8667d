use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ensemble::{error_tokens_partial, Ensemble, ErrorTokenTrace};
use crate::error::{Error, Result};
use crate::numkit::{log_softmax, Tensor};
use crate::scalar::{Precision, Scalar};
use crate::tasks::Example;
use crate::training::alignment::{descent_lr_bound, estimate_alignment, flat, secant_smoothness, AlignmentEstimate};
use crate::training::loss::{sgd_step, split_logit_grads};
use crate::transformer::{
    backward_accumulate, forward_teacher, forward_with_tape, seeded_rng, FusionInput, Gradients, LayerTrace,
    Transformer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Scale inside the suppression sigmoid.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Sequences used per epoch for the alignment and smoothness estimates.
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.9,
            beta: 0.1,
            learning_rate: 0.5,
            epochs: 20,
            batch_size: 16,
            seed: 1,
            precision: Precision::F64,
            probe_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("learning_rate", self.learning_rate)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub model: usize,
    pub epoch: usize,
    /// Mean cross-entropy per supervised token over the epoch's batches.
    pub ce: f64,
    /// Mean suppression loss per supervised token.
    pub suppression: f64,
    pub error_tokens: usize,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub smoothness: Option<f64>,
    pub eta_bound: Option<f64>,
}

/// What a model sees from its predecessor, per example.
#[derive(Debug, Clone)]
pub struct StageInputs<T> {
    pub fusion: Vec<Option<Vec<FusionInput<T>>>>,
    pub errors: Vec<ErrorTokenTrace>,
}

impl<T: Scalar> StageInputs<T> {
    /// Inputs for a model without predecessor.
    pub fn standalone(data: &[Example]) -> Self {
        StageInputs { fusion: vec![None; data.len()], errors: data.iter().map(|e| vec![None; e.input.len()]).collect() }
    }

    /// Inputs for successor `i` from the frozen predecessor's traces.
    pub fn from_predecessor(ens: &Ensemble<T>, i: usize, data: &[Example], pred: &[LayerTrace<T>]) -> Result<Self> {
        let mut fusion = Vec::with_capacity(data.len());
        let mut errors = Vec::with_capacity(data.len());
        for (ex, trace) in data.iter().zip(pred) {
            errors.push(error_tokens_partial(&trace.logits, &ex.gold)?);
            fusion.push(if ens.fusion {
                Some(trace.states.iter().map(|s| ens.step_fusion(i, s).map(|f| f.unwrap_or_default())).collect::<Result<_>>()?)
            } else {
                None
            });
        }
        Ok(StageInputs { fusion, errors })
    }

    pub fn active_errors(&self) -> usize {
        self.errors.iter().flatten().flatten().count()
    }
}

/// Teacher-forced pass of every model in the chain, each fed its predecessor's states.
pub fn chain_traces<T: Scalar>(ens: &Ensemble<T>, input: &[usize]) -> Result<Vec<LayerTrace<T>>> {
    let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(ens.len());
    for (i, model) in ens.models.iter().enumerate() {
        let fusion = match traces.last() {
            Some(pred) if ens.fusion => {
                Some(pred.states.iter().map(|s| ens.step_fusion(i, s).map(|f| f.unwrap_or_default())).collect::<Result<Vec<_>>>()?)
            }
            _ => None,
        };
        traces.push(forward_teacher(model, input, fusion.as_deref())?);
    }
    Ok(traces)
}

/// Summed loss terms and gradients over a set of sequences.
#[derive(Debug, Clone)]
pub struct BatchEval<T> {
    pub ce_sum: T,
    pub suppression_sum: T,
    pub tokens: usize,
    pub errors: usize,
    pub grads: Gradients<T>,
}

/// Which gradient `batch_eval` returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradTerm<T> {
    /// `α·CE + suppression`, averaged over supervised tokens.
    Composite { alpha: T, beta: T },
    /// Cross-entropy only, averaged over supervised tokens.
    CrossEntropy,
    /// Suppression only (with scale `beta`), averaged over supervised tokens.
    Suppression { beta: T },
}

pub fn batch_eval<T: Scalar>(
    model: &Transformer<T>,
    data: &[Example],
    inputs: &StageInputs<T>,
    idx: &[usize],
    term: GradTerm<T>,
) -> Result<BatchEval<T>> {
    let tokens: usize = idx.iter().map(|&i| data[i].supervised()).sum();
    let norm = T::one() / T::of(tokens.max(1) as f64);
    let beta = match term {
        GradTerm::Composite { beta, .. } | GradTerm::Suppression { beta } => beta,
        GradTerm::CrossEntropy => T::of(0.1),
    };
    let mut out = BatchEval {
        ce_sum: T::zero(),
        suppression_sum: T::zero(),
        tokens,
        errors: 0,
        grads: Gradients::for_training(model),
    };
    for &i in idx {
        let ex = &data[i];
        let errs = &inputs.errors[i];
        let (trace, tape) = forward_with_tape(model, &ex.input, inputs.fusion[i].as_deref())?;
        let mut dlogits = Vec::with_capacity(ex.input.len());
        for (t, z) in trace.logits.iter().enumerate() {
            let Some(gold) = ex.gold[t] else {
                dlogits.push(Tensor::zeros(&[z.len()]));
                continue;
            };
            let logp = log_softmax(z)?;
            let p: Vec<T> = logp.data().iter().map(|&l| l.exp()).collect();
            out.ce_sum -= logp.data()[gold];
            let err = errs[t];
            if let Some(e) = err {
                out.errors += 1;
                let u = beta * (logp.data()[gold] - logp.data()[e]);
                out.suppression_sum += crate::numkit::neg_log_sigmoid(u);
            }
            let (ce, s) = split_logit_grads(&p, gold, err, beta);
            let g: Vec<T> = match term {
                GradTerm::Composite { alpha, .. } => ce.iter().zip(&s).map(|(&c, &s)| (alpha * c + s) * norm).collect(),
                GradTerm::CrossEntropy => ce.iter().map(|&c| c * norm).collect(),
                GradTerm::Suppression { .. } => s.iter().map(|&s| s * norm).collect(),
            };
            dlogits.push(Tensor::vector(g));
        }
        backward_accumulate(model, &tape, &dlogits, &mut out.grads)?;
    }
    Ok(out)
}

/// Trains one model in place. `use_suppression` selects the composite loss;
/// otherwise plain cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn train_model<T: Scalar>(
    model: &mut Transformer<T>,
    data: &[Example],
    inputs: &StageInputs<T>,
    cfg: &TrainConfig,
    stage: u8,
    index: usize,
    use_suppression: bool,
    log: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(ex) = data.iter().find(|e| e.input.len() > model.spec().max_steps) {
        return Err(Error::Range(format!(
            "sequence of length {} exceeds max_steps {}",
            ex.input.len(),
            model.spec().max_steps
        )));
    }
    let alpha = T::of(cfg.alpha);
    let beta = T::of(cfg.beta);
    let term = if use_suppression { GradTerm::Composite { alpha, beta } } else { GradTerm::CrossEntropy };
    let mut rng = seeded_rng(cfg.seed ^ ((index as u64 + 1) << 32));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let probe: Vec<usize> = (0..data.len()).filter(|&i| inputs.errors[i].iter().any(Option::is_some)).take(cfg.probe_samples).collect();
    let ce_probe: Vec<usize> = (0..data.len().min(cfg.probe_samples.max(1))).collect();
    let mut last_point: Option<(Vec<T>, Vec<T>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut supp, mut tokens, mut errors) = (T::zero(), T::zero(), 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let eval = batch_eval(model, data, inputs, batch, term)?;
            if !(eval.ce_sum.is_finite() && eval.suppression_sum.is_finite()) || !eval.grads.norm().is_finite() {
                return Err(Error::Divergence(format!(
                    "model {index} epoch {epoch}: loss or gradient is not finite (ce sum {})",
                    eval.ce_sum
                )));
            }
            ce += eval.ce_sum;
            supp += eval.suppression_sum;
            tokens += eval.tokens;
            errors += eval.errors;
            sgd_step(&mut model.trainable_mut(), &eval.grads.trainable(), T::of(cfg.learning_rate))?;
        }
        let n = T::of(tokens.max(1) as f64);
        let mut m = EpochMetrics {
            stage,
            model: index,
            epoch,
            ce: (ce / n).as_f64(),
            suppression: if use_suppression { (supp / n).as_f64() } else { 0.0 },
            error_tokens: if use_suppression { errors } else { 0 },
            rho: None,
            gamma: None,
            smoothness: None,
            eta_bound: None,
        };
        if use_suppression && cfg.probe_samples > 0 {
            let params = flat(&model.trainable());
            let g = flat(&batch_eval(model, data, inputs, &ce_probe, GradTerm::CrossEntropy)?.grads.trainable());
            if let Some((p0, g0)) = &last_point {
                m.smoothness = secant_smoothness(p0, g0, &params, &g).map(|x| x.as_f64());
            }
            last_point = Some((params, g));
            if !probe.is_empty() {
                let est: AlignmentEstimate = estimate_alignment(model, data, inputs, &probe, cfg)?;
                m.rho = Some(est.rho);
                m.gamma = Some(est.gamma);
                if let Some(l) = m.smoothness {
                    m.eta_bound = descent_lr_bound(cfg.alpha, est.rho, est.gamma, l).ok();
                }
            }
        }
        log(&m)?;
        history.push(m);
    }
    Ok(history)
}

/// Two-stage chain training: the base model on cross-entropy, then each
/// successor on the composite loss against its frozen predecessor.
pub fn train_chain<T: Scalar>(
    mut ens: Ensemble<T>,
    data: &[Example],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Ensemble<T>, Vec<EpochMetrics>)> {
    cfg.validate()?;
    ens.spec().validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut history = Vec::new();
    let base_inputs = StageInputs::standalone(data);
    history.extend(train_model(&mut ens.models[0], data, &base_inputs, cfg, 1, 0, false, log)?);
    for i in 1..ens.len() {
        let prefix = ens.prefix(i);
        let pred: Vec<LayerTrace<T>> = data
            .iter()
            .map(|ex| chain_traces(&prefix, &ex.input).map(|mut t| t.pop().expect("nonempty chain")))
            .collect::<Result<_>>()?;
        let inputs = StageInputs::from_predecessor(&ens, i, data, &pred)?;
        history.extend(train_model(&mut ens.models[i], data, &inputs, cfg, 2, i, true, log)?);
    }
    Ok((ens, history))
}

/// Writes metrics as one JSON object per line.
pub fn jsonl_sink<W: Write>(w: &mut W) -> impl FnMut(&EpochMetrics) -> Result<()> + '_ {
    move |m| {
        serde_json::to_writer(&mut *w, m).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io("metrics", e))
    }
}

/// Teacher-forced accuracy over supervised positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate<T: Scalar>(ens: &Ensemble<T>, data: &[Example]) -> Result<EvalReport> {
    let (mut base_ok, mut ens_ok, mut tokens) = (0usize, 0usize, 0usize);
    for ex in data {
        let traces = chain_traces(ens, &ex.input)?;
        for (t, gold) in ex.gold.iter().enumerate() {
            let Some(gold) = *gold else { continue };
            tokens += 1;
            let zs: Vec<Tensor<T>> = traces.iter().map(|tr| tr.logits[t].clone()).collect();
            base_ok += usize::from(zs[0].argmax() == gold);
            ens_ok += usize::from(ens.fuse(&zs)?.argmax() == gold);
        }
    }
    let denom = tokens.max(1) as f64;
    Ok(EvalReport { base_accuracy: base_ok as f64 / denom, ensemble_accuracy: ens_ok as f64 / denom, tokens })
}
