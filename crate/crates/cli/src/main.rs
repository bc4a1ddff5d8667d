//! `chainboost` command line: dataset generation, chain training, decoding,
//! latency benchmarks, self-checks and the pipelining latency model.

mod bench;
mod sched;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use chainboost::ensemble::{load_ensemble, Ensemble};
use chainboost::experiment::{run_training, RunConfig, RunSummary};
use chainboost::pipeline::{decode_pipelined, decode_sequential, PipelineOptions, TimingReport};
use chainboost::tasks::{gen_dataset, write_dataset, TaskKind, TaskSpec};
use chainboost::verify::{parse_selector, run_suite};
use chainboost::{Precision, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "chainboost", version, about = "Boosted transformer chains: train, decode, benchmark, verify")]
struct Cli {
    /// Seed for data generation, or the single training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Arithmetic precision for models.
    #[arg(long, global = true, value_parser = clap::value_parser!(Precision))]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Gen(GenArgs),
    /// Train a chain per seed and report held-out accuracy.
    Train(TrainArgs),
    /// Greedy decode prompts with a saved ensemble.
    Infer(InferArgs),
    /// Repeated sequential and pipelined decodes with latency statistics.
    Bench(BenchArgs),
    /// Run self-check suites: grad, remainder, mse, descent, sched or all.
    Verify {
        #[arg(default_value = "all")]
        selector: String,
    },
    /// Speedup table of the pipelined latency model.
    Sched(sched::SchedArgs),
}

#[derive(Args, Default)]
struct TaskFlags {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    modulus: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

impl TaskFlags {
    fn apply(&self, t: &mut TaskSpec) {
        if let Some(v) = self.task {
            t.kind = v;
        }
        set(&mut t.min_len, self.min_len);
        set(&mut t.max_len, self.max_len);
        set(&mut t.vocab, self.vocab);
        set(&mut t.modulus, self.modulus);
        set(&mut t.samples, self.samples);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    task: TaskFlags,
    /// Destination file; defaults to `<out>/<task>.jsonl`.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    heldout_samples: Option<usize>,
    /// Start from a saved ensemble.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Chain length including the base model.
    #[arg(long)]
    n_models: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    fusion_period: Option<usize>,
    #[arg(long)]
    adapter_rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    probe_samples: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Sequential,
    Pipelined,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Pipelined => "pipelined",
        })
    }
}

#[derive(Args)]
struct DecodeFlags {
    /// Ensemble manifest written by `train`.
    #[arg(long)]
    manifest: PathBuf,
    /// One prompt per line as whitespace-separated token ids.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, default_value_t = 16)]
    max_tokens: usize,
    /// Executor threads for pipelined decoding; models are assigned round-robin.
    #[arg(long)]
    pin: Option<usize>,
    /// Seconds a worker may wait for a hidden state before reporting deadlock.
    #[arg(long, default_value_t = 5.0)]
    timeout: f64,
}

impl DecodeFlags {
    fn options(&self) -> PipelineOptions {
        PipelineOptions { executors: self.pin, timeout: std::time::Duration::from_secs_f64(self.timeout) }
    }
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long, value_enum, default_value_t = Mode::Pipelined)]
    mode: Mode,
    /// Also write outputs and timings as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// CSV destination; defaults to `<out>/bench.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Bad invocation: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A check ran and failed: exit code 1 without an error message.
#[derive(Debug)]
struct Failed;

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("one or more checks failed")
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Failed>() => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match &cli.command {
        Command::Gen(args) => cmd_gen(args, cli.seed, &out),
        Command::Train(args) => cmd_train(args, &cli),
        Command::Infer(args) => match cli.precision.unwrap_or_default() {
            Precision::F64 => cmd_infer::<f64>(args),
            Precision::F32 => cmd_infer::<f32>(args),
        },
        Command::Bench(args) => match cli.precision.unwrap_or_default() {
            Precision::F64 => bench::cmd_bench::<f64>(args, &out),
            Precision::F32 => bench::cmd_bench::<f32>(args, &out),
        },
        Command::Verify { selector } => cmd_verify(selector),
        Command::Sched(args) => sched::cmd_sched(args, &out),
    }
}

fn cmd_gen(args: &GenArgs, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut task = TaskSpec::default();
    args.task.apply(&mut task);
    set(&mut task.seed, seed);
    task.validate().map_err(|e| usage(e.to_string()))?;
    let data = gen_dataset(&task)?;
    let path = args.file.clone().unwrap_or_else(|| out.join(format!("{}.jsonl", task.kind)));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_dataset(&path, &data)?;
    println!("wrote {} {} sequences to {}", data.len(), task.kind, path.display());
    Ok(())
}

fn train_config(args: &TrainArgs, cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    set(&mut cfg.seeds, args.seeds.clone());
    if let Some(p) = cli.precision {
        cfg.train.precision = p;
    }
    let task_given = args.task.task.is_some()
        || args.task.min_len.is_some()
        || args.task.max_len.is_some()
        || args.task.modulus.is_some()
        || args.task.samples.is_some();
    if task_given || args.task.vocab.is_some() {
        let t = cfg.task.get_or_insert_with(TaskSpec::default);
        args.task.apply(t);
    }
    if let Some(c) = &args.corpus {
        cfg.corpus = Some(c.clone());
        if !task_given {
            cfg.task = None;
        }
    }
    if args.heldout.is_some() {
        cfg.heldout = args.heldout.clone();
    }
    set(&mut cfg.heldout_samples, args.heldout_samples);
    if args.manifest.is_some() {
        cfg.manifest = args.manifest.clone();
    }
    set(&mut cfg.n_models, args.n_models);
    if args.lambdas.is_some() {
        cfg.lambdas = args.lambdas.clone();
    }
    set(&mut cfg.top_k, args.top_k);
    if args.no_fusion {
        cfg.fusion = false;
    }
    let m = &mut cfg.model;
    set(&mut m.n_layers, args.layers);
    set(&mut m.d_model, args.d_model);
    set(&mut m.n_heads, args.heads);
    set(&mut m.d_ff, args.d_ff);
    set(&mut m.vocab, args.task.vocab);
    set(&mut m.max_steps, args.max_steps);
    set(&mut m.fusion_period, args.fusion_period);
    set(&mut m.adapter_rank, args.adapter_rank);
    let t = &mut cfg.train;
    set(&mut t.alpha, args.alpha);
    set(&mut t.beta, args.beta);
    set(&mut t.learning_rate, args.lr);
    set(&mut t.epochs, args.epochs);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.probe_samples, args.probe_samples);
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs, cli: &Cli) -> anyhow::Result<()> {
    let cfg = train_config(args, cli)?;
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let summary: RunSummary = match cfg.train.precision {
        Precision::F64 => run_training::<f64>(&cfg)?,
        Precision::F32 => run_training::<f32>(&cfg)?,
    };
    println!("{:>6}  {:>10}  {:>10}  {:>8}  manifest", "seed", "base", "ensemble", "tokens");
    for s in &summary.seeds {
        println!(
            "{:>6}  {:>10.4}  {:>10.4}  {:>8}  {}",
            s.seed,
            s.heldout.base_accuracy,
            s.heldout.ensemble_accuracy,
            s.heldout.tokens,
            s.manifest.display()
        );
    }
    println!("{:>6}  {:>10.4}  {:>10.4}", "mean", summary.mean_base_accuracy, summary.mean_ensemble_accuracy);
    Ok(())
}

/// Prompts from a file of whitespace-separated token ids, one per line.
fn read_prompts(path: &Path) -> anyhow::Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| usage(format!("{}:{}: '{t}' is not a token id", path.display(), i + 1))))
                .collect()
        })
        .collect()
}

fn load<T: Scalar>(flags: &DecodeFlags) -> anyhow::Result<(Ensemble<T>, Vec<Vec<usize>>)> {
    let ens = load_ensemble::<T>(&flags.manifest)?;
    Ok((ens, read_prompts(&flags.prompts)?))
}

#[derive(Serialize)]
struct InferReport {
    mode: String,
    outputs: Vec<Vec<usize>>,
    end_to_end_us: f64,
    per_token_us: f64,
    blocked_us: f64,
    state_passing_us: f64,
    timings: Vec<TimingReport>,
}

/// One decode of every prompt in the given mode.
pub(crate) fn decode_all<T: Scalar>(
    ens: &Ensemble<T>,
    prompts: &[Vec<usize>],
    flags: &DecodeFlags,
    mode: Mode,
) -> anyhow::Result<(Vec<Vec<usize>>, Vec<TimingReport>, f64)> {
    let opts = flags.options();
    let mut outputs = Vec::with_capacity(prompts.len());
    let mut timings = Vec::new();
    let t0 = Instant::now();
    for p in prompts {
        match mode {
            Mode::Sequential => outputs.push(decode_sequential(ens, p, flags.max_tokens)?.tokens),
            Mode::Pipelined => {
                let (o, t) = decode_pipelined(ens, p, flags.max_tokens, &opts)?;
                outputs.push(o.tokens);
                timings.push(t);
            }
        }
    }
    Ok((outputs, timings, t0.elapsed().as_secs_f64() * 1e6))
}

fn cmd_infer<T: Scalar>(args: &InferArgs) -> anyhow::Result<()> {
    let (ens, prompts) = load::<T>(&args.decode)?;
    let (outputs, timings, wall_us) = decode_all(&ens, &prompts, &args.decode, args.mode)?;
    for (p, o) in prompts.iter().zip(&outputs) {
        println!("{} -> {}", join(p), join(o));
    }
    let tokens: usize = outputs.iter().map(Vec::len).sum();
    let report = InferReport {
        mode: args.mode.to_string(),
        end_to_end_us: wall_us,
        per_token_us: if tokens == 0 { 0.0 } else { wall_us / tokens as f64 },
        blocked_us: timings.iter().fold(0.0, |a, t| a + t.blocked_us),
        state_passing_us: timings.iter().fold(0.0, |a, t| a + t.state_passing_us),
        outputs,
        timings,
    };
    println!("mode              {}", report.mode);
    println!("end_to_end_ms     {:.3}", report.end_to_end_us / 1e3);
    println!("per_token_ms      {:.3}", report.per_token_us / 1e3);
    println!("blocked_ms        {:.3}", report.blocked_us / 1e3);
    println!("state_passing_ms  {:.3}", report.state_passing_us / 1e3);
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_verify(selector: &str) -> anyhow::Result<()> {
    let suites = parse_selector(selector).map_err(|e| usage(e.to_string()))?;
    let mut ok = true;
    for s in suites {
        let rep = run_suite(s)?;
        for c in &rep.checks {
            println!("{:<9} {:<4} {}: {}", s.to_string(), if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
        }
        println!("{:<9} {} in {:.2}s", s.to_string(), if rep.passed() { "passed" } else { "FAILED" }, rep.seconds);
        ok &= rep.passed();
    }
    if !ok {
        bail!(Failed);
    }
    Ok(())
}
