//! Self-check suites with pinned seeds and tolerances, run by `chainboost verify`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_rational::Ratio;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::numkit::{finite_diff_grad, log_softmax, relative_error, softmax, Tensor};
use crate::schedlab::{simulate_schedule, t_parallel_closed, t_sequential, SchedProblem};
use crate::tasks::{gen_dataset, TaskKind, TaskSpec};
use crate::theory::{descent_probe, log_grid, mse_sweep, remainder_probe};
use crate::training::{chain_traces, loss_logit_grad, suppression_loss, train_model, StageInputs, TrainConfig};
use crate::transformer::{seeded_rng, ModelSpec, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Remainder,
    Mse,
    Descent,
    Sched,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Remainder, Suite::Mse, Suite::Descent, Suite::Sched];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Grad => "grad",
            Suite::Remainder => "remainder",
            Suite::Mse => "mse",
            Suite::Descent => "descent",
            Suite::Sched => "sched",
        })
    }
}

/// `all` or one suite name.
pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    Suite::ALL
        .into_iter()
        .find(|x| x.to_string() == s)
        .map(|x| vec![x])
        .ok_or_else(|| Error::Parse(format!("unknown suite '{s}' (grad, remainder, mse, descent, sched, all)")))
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match parse_selector(s)?.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Parse("expected a single suite".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let checks = match suite {
        Suite::Grad => grad_suite()?,
        Suite::Remainder => remainder_suite()?,
        Suite::Mse => mse_suite()?,
        Suite::Descent => descent_suite()?,
        Suite::Sched => sched_suite(),
    };
    Ok(SuiteReport { suite, checks, seconds: t0.elapsed().as_secs_f64() })
}

pub const GRAD_DRAWS: usize = 1000;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Composite single-step loss from logits.
fn step_loss(z: &Tensor<f64>, gold: usize, err: Option<usize>, alpha: f64, beta: f64) -> f64 {
    let p = softmax(z).expect("vector");
    let s = suppression_loss(&p, gold, err, beta).expect("valid draw").value;
    s - alpha * log_softmax(z).expect("vector").data()[gold]
}

/// Worst relative error of the analytic logit gradient over `draws` random cases.
pub fn logit_grad_worst_error(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let v = rng.random_range(2..=16);
        let z = Tensor::vector((0..v).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect());
        let gold = rng.random_range(0..v);
        let err = if rng.random_bool(0.7) {
            Some((gold + rng.random_range(1..v)) % v)
        } else {
            None
        };
        let alpha = rng.random_range(0.05..2.0);
        let beta = rng.random_range(0.01..2.0);
        let p = softmax(&z)?;
        let analytic = loss_logit_grad(&p, gold, err, alpha, beta)?;
        let numeric = finite_diff_grad(|x| step_loss(x, gold, err, alpha, beta), &z, 1e-5)?;
        worst = worst.max(relative_error(analytic.data(), numeric.data(), 1e-10));
    }
    Ok(worst)
}

fn grad_suite() -> Result<Vec<Check>> {
    let worst = logit_grad_worst_error(GRAD_DRAWS, 1)?;
    Ok(vec![check(
        "logit gradient vs central differences",
        worst < GRAD_TOLERANCE,
        format!("{GRAD_DRAWS} draws, worst relative error {worst:.3e} (limit {GRAD_TOLERANCE:e})"),
    )])
}

fn remainder_suite() -> Result<Vec<Check>> {
    let scales = log_grid(1e-3, 1e-1, 9);
    let mut rng = seeded_rng(2);
    let mut out = Vec::new();
    for v in [4usize, 16, 64] {
        let (mut lo, mut hi, mut cmax, mut env) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, true);
        for point in 0..10 {
            let scale = rng.random_range(0.5..10.0);
            let raw: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let inf = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let z = Tensor::vector(raw.iter().map(|x| x / inf * scale).collect());
            let fit = remainder_probe(&z, &scales, 16, 100 + point)?;
            lo = lo.min(fit.exponent);
            hi = hi.max(fit.exponent);
            cmax = cmax.max(fit.c_fit);
            env &= fit.envelope_holds();
        }
        out.push(check(
            &format!("remainder exponent, V={v}"),
            (1.9..=2.1).contains(&lo) && (1.9..=2.1).contains(&hi),
            format!("10 base points, exponents in [{lo:.4}, {hi:.4}]"),
        ));
        out.push(check(
            &format!("remainder envelope, V={v}"),
            env && cmax <= 0.5,
            format!("C_fit max {cmax:.4} (analytic ceiling 0.5)"),
        ));
    }
    Ok(out)
}

fn mse_suite() -> Result<Vec<Check>> {
    let mut rng = seeded_rng(3);
    let v = 10;
    let n = 400;
    let (mut prev, mut new, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let g = rng.random_range(0..v);
        prev.push(Tensor::vector((0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()));
        // a noisy corrector that favours the gold token
        new.push(Tensor::vector(
            (0..v).map(|i| if i == g { 2.0 } else { 0.0 } + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect(),
        ));
        gold.push(g);
    }
    let mut grid = vec![1e-3];
    grid.extend(log_grid(1e-2, 0.5, 12));
    let rep = mse_sweep(&prev, &new, &gold, &grid)?;
    let zeros: Vec<Tensor<f64>> = prev.iter().map(|z| Tensor::zeros(&[z.len()])).collect();
    let flat = mse_sweep(&prev, &zeros, &gold, &grid)?;
    let order_grid = log_grid(1e-3, 1e-1, 9);
    let order = mse_sweep(&prev, &new, &gold, &order_grid)?.residual_order();
    let p0 = &rep.points[0];
    let slope_err = (p0.delta_mse / p0.lambda + 2.0 * rep.mean_eg).abs() / (2.0 * rep.mean_eg).abs();
    Ok(vec![
        check("zero corrector leaves MSE unchanged", flat.points.iter().all(|p| p.delta_mse == 0.0), "all λ".into()),
        check(
            "constructed corrector has a working λ in (0, 0.5]",
            rep.mean_eg > 0.0 && rep.working_range.is_some(),
            format!("mean(e·g) {:.4e}, range {:?}", rep.mean_eg, rep.working_range),
        ),
        check(
            "ΔMSE/λ at λ=1e-3 matches −2·mean(e·g)",
            slope_err < 0.05,
            format!("relative difference {slope_err:.3e}"),
        ),
        check("residual is second order in λ", order >= 1.9, format!("log-log slope {order:.3}")),
    ])
}

/// Descent probe setting shared with the acceptance suite: a briefly trained
/// predecessor that still errs and a fresh successor.
pub fn descent_setup(kind: TaskKind, sequences: usize) -> Result<(Transformer<f64>, Vec<crate::tasks::Example>, StageInputs<f64>)> {
    let task = TaskSpec { kind, min_len: 3, max_len: 6, vocab: 16, modulus: 7, samples: 256, seed: 11 };
    let data = gen_dataset(&task)?;
    let spec = ModelSpec {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: 16,
        max_steps: 16,
        fusion_period: 2,
        adapter_rank: 0,
        seed: 5,
    };
    let mut base = Transformer::<f64>::new(spec.clone())?;
    let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
    train_model(&mut base, &data, &StageInputs::standalone(&data), &cfg, 1, 0, false, &mut |_| Ok(()))?;
    let succ = Transformer::new(ModelSpec { seed: 6, ..spec })?;
    let ens = Ensemble::from_models(vec![base, succ], vec![0.3], 2, true)?;
    let subset = data[..sequences].to_vec();
    let pred = subset
        .iter()
        .map(|ex| chain_traces(&ens.prefix(1), &ex.input).map(|mut t| t.pop().expect("one model")))
        .collect::<Result<Vec<_>>>()?;
    let inputs = StageInputs::from_predecessor(&ens, 1, &subset, &pred)?;
    Ok((ens.models[1].clone(), subset, inputs))
}

pub const DESCENT_STEPS: usize = 200;
pub const DESCENT_FACTOR: f64 = 0.9;
/// First rate tried by the bisection. Alignment is measured along the
/// trajectory, so a gentle start keeps the first estimate representative.
pub const DESCENT_INITIAL_LR: f64 = 0.05;

fn descent_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in [TaskKind::Modsum, TaskKind::Copy] {
        let (model, data, inputs) = descent_setup(kind, 24)?;
        let r = descent_probe(&model, &data, &inputs, 0.9, 0.1, DESCENT_STEPS, DESCENT_INITIAL_LR, DESCENT_FACTOR)?;
        out.push(check(
            &format!("guaranteed descent on {kind}"),
            r.precondition_holds() && r.within(DESCENT_FACTOR) && r.violations == 0,
            format!(
                "{} error tokens, ρ̂ {:.3}, Γ̂ {:.3}, L̂ {:.3}, η {:.4e} = {:.3}·η*, {} violations in {} steps",
                inputs.active_errors(),
                r.rho,
                r.gamma,
                r.smoothness,
                r.learning_rate,
                r.bound.map_or(f64::NAN, |b| r.learning_rate / b),
                r.violations,
                DESCENT_STEPS
            ),
        ));
    }
    Ok(out)
}

fn sched_suite() -> Vec<Check> {
    let mut mismatches = Vec::new();
    let (mut g1, mut saturated) = (true, true);
    for k in 1..=6usize {
        for l in 1..=12usize {
            for g in 1..=4usize {
                let p = SchedProblem { k, l, g, c: 1u64, delta: 0 };
                let closed = t_parallel_closed(&p);
                let sim = simulate_schedule(&p).makespan;
                if closed != sim {
                    mismatches.push(format!("(k={k}, l={l}, g={g}): closed {closed} vs simulated {sim}"));
                }
                let seq = t_sequential(k - 1, l, 1u64);
                if g == 1 && seq != closed {
                    g1 = false;
                }
                // speedup kl/(k+l−1) once every anti-diagonal fits on the processors
                if g >= k.min(l) && Ratio::new(seq, closed) != Ratio::new((k * l) as u64, (k + l - 1) as u64) {
                    saturated = false;
                }
            }
        }
    }
    vec![
        check(
            "closed form equals simulated makespan on [1..6]×[1..12]×[1..4]",
            mismatches.is_empty(),
            if mismatches.is_empty() { "432 grid points".into() } else { mismatches.join("; ") },
        ),
        check("speedup is 1 with one processor", g1, "g=1 column".into()),
        check("speedup is kl/(k+l−1) when g ≥ min(k,l)", saturated, "saturated rows".into()),
    ]
}
