//! Run configuration and the multi-seed train/evaluate driver behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{load_ensemble, save_ensemble, Ensemble, EnsembleSpec, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tasks::{gen_dataset, read_dataset, Example, TaskSpec};
use crate::training::{evaluate, jsonl_sink, train_chain, EvalReport, TrainConfig};
use crate::transformer::ModelSpec;

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Seed offset between the training and held-out draws of a synthetic task.
pub const HELDOUT_SEED_OFFSET: u64 = 7919;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Start from these checkpoints instead of fresh models.
    pub manifest: Option<PathBuf>,
    pub model: ModelSpec,
    /// Chain length including the base model.
    pub n_models: usize,
    /// One per successor; defaults to 0.3 each.
    pub lambdas: Option<Vec<f64>>,
    pub top_k: usize,
    pub fusion: bool,
    pub train: TrainConfig,
    pub task: Option<TaskSpec>,
    /// Line-delimited dataset used instead of `task`.
    pub corpus: Option<PathBuf>,
    /// Held-out set for a corpus; the last fifth of the corpus otherwise.
    pub heldout: Option<PathBuf>,
    /// Held-out size for synthetic tasks.
    pub heldout_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs"),
            seeds: DEFAULT_SEEDS.to_vec(),
            manifest: None,
            model: ModelSpec {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                d_ff: 64,
                vocab: 16,
                max_steps: 16,
                fusion_period: 2,
                adapter_rank: 0,
                seed: 1,
            },
            n_models: 2,
            lambdas: None,
            top_k: DEFAULT_TOP_K,
            fusion: true,
            train: TrainConfig::default(),
            task: Some(TaskSpec::default()),
            corpus: None,
            heldout: None,
            heldout_samples: 128,
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn ensemble_spec(&self, seed: u64) -> EnsembleSpec {
        let model = ModelSpec { seed: seed.wrapping_mul(1000), ..self.model.clone() };
        let mut spec = EnsembleSpec::uniform(&model, self.n_models);
        if let Some(l) = &self.lambdas {
            spec.lambdas = l.clone();
        }
        spec.top_k = self.top_k;
        spec.fusion = self.fusion;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.n_models == 0 {
            return Err(Error::Config("n_models must be at least 1".into()));
        }
        self.train.validate()?;
        if self.manifest.is_none() {
            self.ensemble_spec(self.seeds[0]).validate()?;
        }
        for p in [&self.manifest, &self.corpus, &self.heldout].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        match (&self.task, &self.corpus) {
            (_, Some(_)) => {}
            (Some(task), None) => {
                task.validate()?;
                if self.manifest.is_none() {
                    if task.vocab != self.model.vocab {
                        return Err(Error::Config(format!(
                            "task vocab {} differs from model vocab {}",
                            task.vocab, self.model.vocab
                        )));
                    }
                    if task.max_input_len() > self.model.max_steps {
                        return Err(Error::Config(format!(
                            "task sequences reach {} tokens but max_steps is {}",
                            task.max_input_len(),
                            self.model.max_steps
                        )));
                    }
                }
            }
            (None, None) => return Err(Error::Config("either task or corpus must be set".into())),
        }
        Ok(())
    }

    /// Training and held-out sets.
    pub fn datasets(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        if let Some(corpus) = &self.corpus {
            let mut train = read_dataset(corpus)?;
            let heldout = match &self.heldout {
                Some(p) => read_dataset(p)?,
                None => {
                    let cut = train.len() - train.len() / 5;
                    train.split_off(cut)
                }
            };
            if train.is_empty() {
                return Err(Error::Config(format!("corpus {} has no training records", corpus.display())));
            }
            return Ok((train, heldout));
        }
        let task = self.task.as_ref().ok_or_else(|| Error::Config("no task configured".into()))?;
        let train = gen_dataset(task)?;
        let heldout = gen_dataset(&TaskSpec {
            seed: task.seed.wrapping_add(HELDOUT_SEED_OFFSET),
            samples: self.heldout_samples.max(1),
            ..task.clone()
        })?;
        Ok((train, heldout))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub heldout: EvalReport,
    pub manifest: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<SeedResult>,
    pub mean_base_accuracy: f64,
    pub mean_ensemble_accuracy: f64,
}

/// Trains and evaluates one chain per seed, writing checkpoints, a manifest and
/// a metrics log under `out/seed_<s>/`.
pub fn run_training<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, heldout) = cfg.datasets()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ens: Ensemble<T> = match &cfg.manifest {
            Some(m) => load_ensemble(m)?,
            None => Ensemble::new(&cfg.ensemble_spec(seed))?,
        };
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let metrics_path = dir.join("metrics.jsonl");
        let mut buf = Vec::new();
        let (ens, _) = train_chain(ens, &train, &tcfg, &mut jsonl_sink(&mut buf))?;
        fs::write(&metrics_path, &buf).map_err(|e| Error::io(&metrics_path, e))?;
        let manifest = save_ensemble(&ens, &dir)?;
        seeds.push(SeedResult { seed, heldout: evaluate(&ens, &heldout)?, manifest, metrics: metrics_path });
    }
    let n = seeds.len() as f64;
    let mean_base_accuracy = seeds.iter().map(|s| s.heldout.base_accuracy).sum::<f64>() / n;
    let mean_ensemble_accuracy = seeds.iter().map(|s| s.heldout.ensemble_accuracy).sum::<f64>() / n;
    let summary = RunSummary { seeds, mean_base_accuracy, mean_ensemble_accuracy };
    let path = cfg.out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
