use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of one chain member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_steps: usize,
    /// Layers `l` (1-based) with `l % fusion_period == 0` receive predecessor state.
    pub fusion_period: usize,
    pub adapter_rank: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab: 64,
            max_steps: 64,
            fusion_period: 2,
            adapter_rank: 4,
            seed: 1,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_steps", self.max_steps),
            ("fusion_period", self.fusion_period),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_fusion_layer(&self, layer: usize) -> bool {
        layer >= 1 && layer <= self.n_layers && layer % self.fusion_period == 0
    }

    /// 1-based indices of the layers that fuse predecessor state.
    pub fn fusion_layers(&self) -> Vec<usize> {
        (1..=self.n_layers).filter(|&l| self.is_fusion_layer(l)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_layers_are_multiples_of_period() {
        let spec = ModelSpec { n_layers: 6, fusion_period: 2, ..ModelSpec::default() };
        assert_eq!(spec.fusion_layers(), vec![2, 4, 6]);
        let spec = ModelSpec { n_layers: 3, fusion_period: 1, ..ModelSpec::default() };
        assert_eq!(spec.fusion_layers(), vec![1, 2, 3]);
        let spec = ModelSpec { n_layers: 3, fusion_period: 4, ..ModelSpec::default() };
        assert!(spec.fusion_layers().is_empty());
    }

    #[test]
    fn heads_must_divide_width() {
        let spec = ModelSpec { d_model: 30, n_heads: 4, ..ModelSpec::default() };
        assert!(spec.validate().is_err());
        assert!(ModelSpec::default().validate().is_ok());
    }
}
