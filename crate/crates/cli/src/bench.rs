//! `bench`: repeated decodes in both modes with median and IQR latencies.

use std::fs;
use std::path::Path;

use anyhow::Context;
use chainboost::pipeline::TimingReport;
use chainboost::Scalar;
use serde::Serialize;

use crate::{decode_all, load, usage, BenchArgs, Mode};

pub const MIN_REPS: usize = 3;

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub rep: usize,
    pub tokens: usize,
    pub end_to_end_us: f64,
    pub per_token_us: f64,
    pub blocked_us: f64,
    pub state_passing_us: f64,
    pub mean_layer_us: f64,
    /// State-passing time per token in units of one layer's compute time.
    pub delta: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn median_iqr(xs: &[f64]) -> (f64, f64) {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

fn mean_layer_us(timings: &[TimingReport]) -> f64 {
    let (sum, n) = timings
        .iter()
        .flat_map(|t| &t.layers)
        .fold((0.0, 0usize), |(s, n), l| (s + (l.finish_us - l.start_us), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn cmd_bench<T: Scalar>(args: &BenchArgs, out: &Path) -> anyhow::Result<()> {
    if args.reps < MIN_REPS {
        return Err(usage(format!("--reps must be at least {MIN_REPS}, got {}", args.reps)));
    }
    let (ens, prompts) = load::<T>(&args.decode)?;
    let mut rows = Vec::new();
    for rep in 0..args.reps {
        for mode in [Mode::Sequential, Mode::Pipelined] {
            let (outputs, timings, wall) = decode_all(&ens, &prompts, &args.decode, mode)?;
            let tokens: usize = outputs.iter().map(Vec::len).sum();
            let per_tok = |x: f64| if tokens == 0 { 0.0 } else { x / tokens as f64 };
            let passing: f64 = timings.iter().fold(0.0, |a, t| a + t.state_passing_us);
            let layer = mean_layer_us(&timings);
            rows.push(BenchRow {
                mode: mode.to_string(),
                rep,
                tokens,
                end_to_end_us: wall,
                per_token_us: per_tok(wall),
                blocked_us: timings.iter().fold(0.0, |a, t| a + t.blocked_us),
                state_passing_us: passing,
                mean_layer_us: layer,
                delta: if layer > 0.0 { per_tok(passing) / layer } else { 0.0 },
            });
        }
    }
    let path = args.csv.clone().unwrap_or_else(|| out.join("bench.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    println!("{:<11} {:>14} {:>12} {:>14} {:>12}", "mode", "e2e_med_ms", "e2e_iqr_ms", "tok_med_ms", "tok_iqr_ms");
    let mut medians = Vec::new();
    for mode in [Mode::Sequential, Mode::Pipelined] {
        let pick = |f: fn(&BenchRow) -> f64| -> Vec<f64> {
            rows.iter().filter(|r| r.mode == mode.to_string()).map(f).collect()
        };
        let (em, ei) = median_iqr(&pick(|r| r.end_to_end_us));
        let (tm, ti) = median_iqr(&pick(|r| r.per_token_us));
        println!("{:<11} {:>14.3} {:>12.3} {:>14.3} {:>12.3}", mode.to_string(), em / 1e3, ei / 1e3, tm / 1e3, ti / 1e3);
        medians.push(em);
    }
    let ratio = if medians[1] > 0.0 { medians[0] / medians[1] } else { f64::NAN };
    println!("speedup (sequential / pipelined median) {ratio:.3}");
    let deltas: Vec<f64> = rows.iter().filter(|r| r.mode == "pipelined").map(|r| r.delta).collect();
    println!("median delta {:.4} layer-times per token", median_iqr(&deltas).0);
    println!("wrote {}", path.display());
    Ok(())
}
