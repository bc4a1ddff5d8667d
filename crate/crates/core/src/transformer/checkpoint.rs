use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::transformer::model::Transformer;
use crate::transformer::weights::{BaseWeights, LayerAdapters};
use crate::transformer::ModelSpec;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model. Weights are always stored as f64, which round-trips f32 exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub precision: Precision,
    pub spec: ModelSpec,
    pub base: BaseWeights<f64>,
    pub adapters: Vec<LayerAdapters<f64>>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Transformer<T>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            precision: T::PRECISION,
            spec: model.spec().clone(),
            base: model.base().cast(),
            adapters: model.adapters().iter().map(|a| a.cast()).collect(),
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<Transformer<T>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: self.format_version, expected: CHECKPOINT_FORMAT_VERSION });
        }
        Transformer::from_parts(self.spec, self.base.cast(), self.adapters.iter().map(|a| a.cast()).collect())
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Transformer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(&Checkpoint::from_model(model)).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Transformer<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}
