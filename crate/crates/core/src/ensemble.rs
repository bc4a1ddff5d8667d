//! Chain wiring: fusion inputs between neighbours, error tokens, top-k
//! logits fusion and the on-disk ensemble manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{argmax, layer_norm, Tensor, LAYER_NORM_EPS};
use crate::scalar::Scalar;
use crate::transformer::{load_checkpoint, save_checkpoint, FusionInput, LayerTrace, ModelSpec, Transformer};

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 2;

/// Per-step predecessor mistake: its argmax where that differs from gold.
pub type ErrorTokenTrace = Vec<Option<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Index 0 is the base model.
    pub models: Vec<ModelSpec>,
    /// One weight per successor.
    pub lambdas: Vec<f64>,
    pub top_k: usize,
    /// When off, successors run without predecessor states.
    pub fusion: bool,
}

impl EnsembleSpec {
    /// `n_models` copies of `model`, each with its own seed offset.
    pub fn uniform(model: &ModelSpec, n_models: usize) -> Self {
        let models = (0..n_models)
            .map(|i| ModelSpec { seed: model.seed.wrapping_add(i as u64 * 1000), ..model.clone() })
            .collect();
        EnsembleSpec {
            models,
            lambdas: vec![DEFAULT_LAMBDA; n_models.saturating_sub(1)],
            top_k: DEFAULT_TOP_K,
            fusion: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.models.first() else {
            return Err(Error::Config("ensemble has no models".into()));
        };
        for (i, m) in self.models.iter().enumerate() {
            m.validate()?;
            if m.vocab != first.vocab {
                return Err(Error::VocabMismatch { index: i, expected: first.vocab, found: m.vocab });
            }
            if m.max_steps != first.max_steps {
                return Err(Error::Config(format!(
                    "model {i} has max_steps {}, base has {}",
                    m.max_steps, first.max_steps
                )));
            }
            if i > 0 && self.fusion && m.d_model != self.models[i - 1].d_model {
                return Err(Error::Config(format!("model {i} width differs from its predecessor; fusion needs equal d_model")));
            }
            if i > 0 && self.fusion && m.fusion_layers().iter().any(|&l| l - 1 > self.models[i - 1].n_layers) {
                return Err(Error::Config(format!("model {i} fuses layers its predecessor does not have")));
            }
        }
        if self.lambdas.len() + 1 != self.models.len() {
            return Err(Error::Config(format!(
                "{} lambdas for {} successors",
                self.lambdas.len(),
                self.models.len() - 1
            )));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("lambda {l} must be positive")));
        }
        if self.top_k == 0 || self.top_k > first.vocab {
            return Err(Error::Range(format!("top_k {} outside 1..={}", self.top_k, first.vocab)));
        }
        Ok(())
    }
}

/// A chain of models with fusion settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub models: Vec<Transformer<T>>,
    pub lambdas: Vec<T>,
    pub top_k: usize,
    pub fusion: bool,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let models = spec.models.iter().map(|m| Transformer::new(m.clone())).collect::<Result<_>>()?;
        Ok(Ensemble {
            models,
            lambdas: spec.lambdas.iter().map(|&l| T::of(l)).collect(),
            top_k: spec.top_k,
            fusion: spec.fusion,
        })
    }

    pub fn from_models(models: Vec<Transformer<T>>, lambdas: Vec<T>, top_k: usize, fusion: bool) -> Result<Self> {
        let e = Ensemble { models, lambdas, top_k, fusion };
        e.spec().validate()?;
        Ok(e)
    }

    pub fn spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            models: self.models.iter().map(|m| m.spec().clone()).collect(),
            lambdas: self.lambdas.iter().map(|l| l.as_f64()).collect(),
            top_k: self.top_k,
            fusion: self.fusion,
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.models[0].spec().vocab
    }

    pub fn max_steps(&self) -> usize {
        self.models[0].spec().max_steps
    }

    /// Only the first `n` models, keeping their weights.
    pub fn prefix(&self, n: usize) -> Self {
        Ensemble {
            models: self.models[..n].to_vec(),
            lambdas: self.lambdas[..n.saturating_sub(1)].to_vec(),
            top_k: self.top_k,
            fusion: self.fusion,
        }
    }

    /// Fusion inputs for model `i` at one step, from its predecessor's layer states.
    pub fn step_fusion(&self, i: usize, pred_states: &[Tensor<T>]) -> Result<Option<FusionInput<T>>> {
        if i == 0 || !self.fusion {
            return Ok(None);
        }
        fusion_for_step(pred_states, self.models[i].spec()).map(Some)
    }

    /// Fused logits for one step.
    pub fn fuse(&self, logits: &[Tensor<T>]) -> Result<Tensor<T>> {
        fuse_logits(logits, &self.lambdas, self.top_k)
    }
}

/// `LayerNorm(h_own + h_pred)` (unit gain, zero bias) on fusion layers; `h_own` elsewhere.
pub fn fuse_hidden<T: Scalar>(h_own: &Tensor<T>, h_pred: &Tensor<T>, layer: usize, period: usize) -> Result<Tensor<T>> {
    let d = h_own.expect_vector("own state")?;
    if h_pred.expect_vector("predecessor state")? != d {
        return Err(Error::Shape(format!("state widths differ: {d} vs {}", h_pred.len())));
    }
    if period == 0 || layer == 0 || layer % period != 0 {
        return Ok(h_own.clone());
    }
    let sum = h_own.add(h_pred)?;
    layer_norm(&sum, &Tensor::filled(&[d], T::one()), &Tensor::zeros(&[d]), T::of(LAYER_NORM_EPS))
}

pub fn error_tokens<T: Scalar>(pred_logits: &[Tensor<T>], gold: &[usize]) -> Result<ErrorTokenTrace> {
    let gold: Vec<Option<usize>> = gold.iter().copied().map(Some).collect();
    error_tokens_partial(pred_logits, &gold)
}

/// Like [`error_tokens`] but unsupervised positions (`None` gold) never carry an error.
pub fn error_tokens_partial<T: Scalar>(pred_logits: &[Tensor<T>], gold: &[Option<usize>]) -> Result<ErrorTokenTrace> {
    if pred_logits.len() != gold.len() {
        return Err(Error::Shape(format!("{} logit steps vs {} gold tokens", pred_logits.len(), gold.len())));
    }
    Ok(pred_logits
        .iter()
        .zip(gold)
        .map(|(z, g)| {
            let g = (*g)?;
            let top = argmax(z.data());
            (top != g).then_some(top)
        })
        .collect())
}

/// Keeps the `k` largest entries in place and zeroes the rest. Ties go to the lower index.
pub fn topk_mask<T: Scalar>(z: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let v = z.expect_vector("logits")?;
    if k == 0 || k > v {
        return Err(Error::Range(format!("k={k} outside 1..={v}")));
    }
    let data = z.data();
    let mut order: Vec<usize> = (0..v).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| data[b].partial_cmp(&data[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![T::zero(); v];
    for &i in &order[..k] {
        out[i] = data[i];
    }
    Ok(Tensor::vector(out))
}

/// `z0 + Σ λ_i · topk_mask(z_i, k)`.
pub fn fuse_logits<T: Scalar>(z_list: &[Tensor<T>], lambdas: &[T], k: usize) -> Result<Tensor<T>> {
    let Some(base) = z_list.first() else {
        return Err(Error::Shape("no logits to fuse".into()));
    };
    if lambdas.len() + 1 != z_list.len() {
        return Err(Error::Shape(format!("{} lambdas for {} successor logits", lambdas.len(), z_list.len() - 1)));
    }
    let v = base.expect_vector("base logits")?;
    let mut out = base.data().to_vec();
    for (z, &lam) in z_list[1..].iter().zip(lambdas) {
        if z.shape() != [v] {
            return Err(Error::Shape(format!("logits shape {:?}, expected [{v}]", z.shape())));
        }
        let masked = topk_mask(z, k)?;
        for (o, &m) in out.iter_mut().zip(masked.data()) {
            *o += lam * m;
        }
    }
    Ok(Tensor::vector(out))
}

/// Fusion inputs for a successor from one step of predecessor states
/// (`pred_states[0]` is the embedding output).
pub fn fusion_for_step<T: Scalar>(pred_states: &[Tensor<T>], successor: &ModelSpec) -> Result<FusionInput<T>> {
    successor
        .fusion_layers()
        .into_iter()
        .map(|l| {
            pred_states
                .get(l - 1)
                .map(|h| (l, h.clone()))
                .ok_or_else(|| Error::Range(format!("predecessor trace has no layer {}", l - 1)))
        })
        .collect()
}

/// Per-step fusion inputs for a successor with `n_layers` layers and fusion period `period`.
pub fn build_fusion_inputs<T: Scalar>(pred: &LayerTrace<T>, period: usize, n_layers: usize) -> Result<Vec<FusionInput<T>>> {
    let succ = ModelSpec { n_layers, fusion_period: period, ..ModelSpec::default() };
    pred.states.iter().map(|states| fusion_for_step(states, &succ)).collect()
}

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Human-readable ensemble description referencing one checkpoint per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Paths relative to the manifest file unless absolute.
    pub checkpoints: Vec<PathBuf>,
    pub lambdas: Vec<f64>,
    pub top_k: usize,
    pub fusion_period: usize,
    #[serde(default = "yes")]
    pub fusion: bool,
}

fn yes() -> bool {
    true
}

pub fn save_ensemble<T: Scalar>(ens: &Ensemble<T>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checkpoints = Vec::new();
    for (i, m) in ens.models.iter().enumerate() {
        let name = PathBuf::from(format!("model_{i}.json"));
        save_checkpoint(m, dir.join(&name))?;
        checkpoints.push(name);
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        checkpoints,
        lambdas: ens.lambdas.iter().map(|l| l.as_f64()).collect(),
        top_k: ens.top_k,
        fusion_period: ens.models.get(1).unwrap_or(&ens.models[0]).spec().fusion_period,
        fusion: ens.fusion,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_ensemble<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Ensemble<T>> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: MANIFEST_FORMAT_VERSION });
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let models: Vec<Transformer<T>> =
        manifest.checkpoints.iter().map(|p| load_checkpoint(root.join(p))).collect::<Result<_>>()?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.spec().fusion_period != manifest.fusion_period {
            return Err(Error::Config(format!(
                "model {i} was built with fusion period {}, manifest says {}",
                m.spec().fusion_period,
                manifest.fusion_period
            )));
        }
    }
    Ensemble::from_models(models, manifest.lambdas.iter().map(|&l| T::of(l)).collect(), manifest.top_k, manifest.fusion)
}
