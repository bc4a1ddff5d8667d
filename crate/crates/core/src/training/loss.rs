use crate::error::{Error, Result};
use crate::numkit::{log_softmax, neg_log_sigmoid, sigmoid, Tensor};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

/// A loss value, flagged when a probability had to be floored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub floored: bool,
}

fn check_probs<T: Scalar>(p: &Tensor<T>, gold: usize, err: Option<usize>) -> Result<usize> {
    let v = p.expect_vector("probabilities")?;
    if gold >= v {
        return Err(Error::Range(format!("gold id {gold} >= vocab {v}")));
    }
    if let Some(e) = err {
        if e >= v {
            return Err(Error::Range(format!("error id {e} >= vocab {v}")));
        }
        if e == gold {
            return Err(Error::Contract(format!("error token {e} equals the gold token")));
        }
    }
    Ok(v)
}

fn floored_log<T: Scalar>(p: T, flag: &mut bool) -> T {
    let floor = T::of(PROB_FLOOR);
    if p < floor {
        *flag = true;
        floor.ln()
    } else {
        p.ln()
    }
}

/// `β (log p[gold] − log p[err])`, with its floor flag.
fn margin<T: Scalar>(p: &[T], gold: usize, err: usize, beta: T) -> (T, bool) {
    let mut floored = false;
    let lg = floored_log(p[gold], &mut floored);
    let le = floored_log(p[err], &mut floored);
    (beta * (lg - le), floored)
}

/// `−log σ(β (log p[gold] − log p[err]))`, zero without an error token.
pub fn suppression_loss<T: Scalar>(p: &Tensor<T>, gold: usize, err: Option<usize>, beta: T) -> Result<LossValue<T>> {
    check_probs(p, gold, err)?;
    let Some(e) = err else {
        return Ok(LossValue { value: T::zero(), floored: false });
    };
    let (u, floored) = margin(p.data(), gold, e, beta);
    Ok(LossValue { value: neg_log_sigmoid(u), floored })
}

/// `Σ_t suppression_t + α Σ_t (−log p_t[gold_t])` over logits.
pub fn total_loss<T: Scalar>(
    logits: &[Tensor<T>],
    gold: &[usize],
    err: &[Option<usize>],
    alpha: T,
    beta: T,
) -> Result<LossValue<T>> {
    if logits.len() != gold.len() || err.len() != gold.len() {
        return Err(Error::Shape(format!(
            "lengths differ: {} logits, {} gold, {} error entries",
            logits.len(),
            gold.len(),
            err.len()
        )));
    }
    let mut total = LossValue { value: T::zero(), floored: false };
    for ((z, &g), &e) in logits.iter().zip(gold).zip(err) {
        let logp = log_softmax(z)?;
        let p = Tensor::vector(logp.data().iter().map(|l| l.exp()).collect());
        let s = suppression_loss(&p, g, e, beta)?;
        let mut floored = s.floored;
        let floor = T::of(PROB_FLOOR).ln();
        if logp.data()[g] < floor {
            floored = true;
        }
        let ce = -logp.data()[g].max(floor);
        total.value += s.value + alpha * ce;
        total.floored |= floored;
    }
    Ok(total)
}

/// Gradient of one step of the composite loss with respect to the logits:
/// `α (p − y*) + [err] β σ(−u) (y_err − y*)`.
pub fn loss_logit_grad<T: Scalar>(p: &Tensor<T>, gold: usize, err: Option<usize>, alpha: T, beta: T) -> Result<Tensor<T>> {
    check_probs(p, gold, err)?;
    let mut g: Vec<T> = p.data().iter().map(|&x| alpha * x).collect();
    g[gold] -= alpha;
    if let Some(e) = err {
        let (u, _) = margin(p.data(), gold, e, beta);
        let w = beta * sigmoid(-u);
        g[e] += w;
        g[gold] -= w;
    }
    Ok(Tensor::vector(g))
}

/// Split gradient terms for one step: `(p − y*, β σ(−u)(y_err − y*))`.
pub(crate) fn split_logit_grads<T: Scalar>(p: &[T], gold: usize, err: Option<usize>, beta: T) -> (Vec<T>, Vec<T>) {
    let mut ce = p.to_vec();
    ce[gold] -= T::one();
    let mut s = vec![T::zero(); p.len()];
    if let Some(e) = err {
        let (u, _) = margin(p, gold, e, beta);
        let w = beta * sigmoid(-u);
        s[e] = w;
        s[gold] = -w;
    }
    (ce, s)
}

/// `params[i] −= lr · grads[i]`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameter tensors, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}
