//! `sched`: speedup table of the pipelined latency model in exact arithmetic.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chainboost::schedlab::{parse_rational, speedup_table, SweepSpec};
use clap::Args;
use num_rational::Ratio;
use serde::Deserialize;

use crate::bench::median_iqr;
use crate::usage;

#[derive(Args)]
pub struct SchedArgs {
    /// Sweep such as `k=1..6 l=1..12 g=1..4 c=1 delta=0`; unspecified keys take those defaults.
    #[arg(num_args = 0..)]
    range: Vec<String>,
    /// Take delta as the median pipelined `delta` column of a bench CSV.
    #[arg(long)]
    delta_from: Option<PathBuf>,
    /// CSV destination; defaults to `<out>/sched.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Deserialize)]
struct BenchDelta {
    mode: String,
    delta: f64,
}

fn delta_from_csv(path: &Path) -> anyhow::Result<Ratio<i64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ds = Vec::new();
    for row in r.deserialize::<BenchDelta>() {
        let row = row.with_context(|| format!("parsing {}", path.display()))?;
        if row.mode == "pipelined" {
            ds.push(row.delta);
        }
    }
    if ds.is_empty() {
        anyhow::bail!("{} has no pipelined rows", path.display());
    }
    let med = median_iqr(&ds).0;
    parse_rational(&format!("{med:.6}")).map_err(|e| usage(e.to_string()))
}

pub fn cmd_sched(args: &SchedArgs, out: &Path) -> anyhow::Result<()> {
    let mut spec: SweepSpec = args.range.join(" ").parse().map_err(|e: chainboost::Error| usage(e.to_string()))?;
    if let Some(p) = &args.delta_from {
        spec.delta = delta_from_csv(p)?;
    }
    let rows = speedup_table(spec.k, spec.l, spec.g, spec.c, spec.delta).map_err(|e| usage(e.to_string()))?;
    let path = args.csv.clone().unwrap_or_else(|| out.join("sched.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["k", "l", "g", "t_seq", "t_par_closed", "t_par_sim", "speedup"])?;
    println!("c = {}  delta = {}", spec.c, spec.delta);
    println!("{:>3} {:>3} {:>3} {:>10} {:>12} {:>12} {:>8}", "k", "l", "g", "t_seq", "t_par", "t_sim", "speedup");
    for r in &rows {
        println!(
            "{:>3} {:>3} {:>3} {:>10} {:>12} {:>12} {:>8.4}",
            r.k, r.l, r.g, r.t_seq.to_string(), r.t_par_closed.to_string(), r.t_par_sim.to_string(), r.speedup
        );
        w.write_record([
            r.k.to_string(),
            r.l.to_string(),
            r.g.to_string(),
            r.t_seq.to_string(),
            r.t_par_closed.to_string(),
            r.t_par_sim.to_string(),
            format!("{:.6}", r.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}
