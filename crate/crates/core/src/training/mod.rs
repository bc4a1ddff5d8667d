//! Composite loss, chain trainer and the constants behind the descent guarantee.

mod alignment;
mod chain;
mod loss;

pub use alignment::{alignment_from_pairs, descent_lr_bound, estimate_alignment, secant_smoothness, AlignmentEstimate};
pub(crate) use alignment::flat;
pub use chain::{
    batch_eval, chain_traces, evaluate, jsonl_sink, train_chain, train_model, BatchEval, EpochMetrics, EvalReport,
    GradTerm, StageInputs, TrainConfig,
};
pub use loss::{loss_logit_grad, sgd_step, suppression_loss, total_loss, LossValue, PROB_FLOOR};
