use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;
use crate::transformer::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    /// Residual normalization applied after attention in fused layers only.
    pub ln_res_gain: Tensor<T>,
    pub ln_res_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    pub unembed: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterTarget {
    #[serde(rename = "W_Q")]
    Query,
    #[serde(rename = "W_V")]
    Value,
}

/// Low-rank weight delta `A·B` (`A: [d_model, r]`, `B: [r, d_model]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter<T> {
    pub target: AdapterTarget,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters<T> {
    pub query: Adapter<T>,
    pub value: Adapter<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn zeros(spec: &ModelSpec) -> Self {
        let (d, f) = (spec.d_model, spec.d_ff);
        LayerWeights {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln_res_gain: Tensor::zeros(&[d]),
            ln_res_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 14] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln_res_gain,
            &self.ln_res_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 14] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln_res_gain,
            &mut self.ln_res_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl<T: Scalar> BaseWeights<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        BaseWeights {
            tok_emb: Tensor::zeros(&[spec.vocab, d]),
            pos_emb: Tensor::zeros(&[spec.max_steps, d]),
            layers: (0..spec.n_layers).map(|_| LayerWeights::zeros(spec)).collect(),
            lnf_gain: Tensor::zeros(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, spec.vocab]),
        }
    }

    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Self::zeros(spec);
        let d = spec.d_model as f64;
        let ff = spec.d_ff as f64;
        fill_normal(&mut w.tok_emb, 1.0, rng);
        fill_normal(&mut w.pos_emb, 1.0, rng);
        for layer in &mut w.layers {
            layer.ln1_gain = Tensor::filled(&[spec.d_model], T::one());
            layer.ln_res_gain = Tensor::filled(&[spec.d_model], T::one());
            layer.ln2_gain = Tensor::filled(&[spec.d_model], T::one());
            for m in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo] {
                fill_normal(m, 1.0 / d.sqrt(), rng);
            }
            fill_normal(&mut layer.w1, 1.0 / d.sqrt(), rng);
            fill_normal(&mut layer.w2, 1.0 / ff.sqrt(), rng);
        }
        w.lnf_gain = Tensor::filled(&[spec.d_model], T::one());
        fill_normal(&mut w.unembed, 1.0 / d.sqrt(), rng);
        w
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.unembed]);
        out
    }

    pub fn cast<U: Scalar>(&self) -> BaseWeights<U> {
        let mut out = BaseWeights::<U> {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: Vec::with_capacity(self.layers.len()),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            unembed: self.unembed.cast(),
        };
        for layer in &self.layers {
            out.layers.push(LayerWeights {
                ln1_gain: layer.ln1_gain.cast(),
                ln1_bias: layer.ln1_bias.cast(),
                wq: layer.wq.cast(),
                wk: layer.wk.cast(),
                wv: layer.wv.cast(),
                wo: layer.wo.cast(),
                ln_res_gain: layer.ln_res_gain.cast(),
                ln_res_bias: layer.ln_res_bias.cast(),
                ln2_gain: layer.ln2_gain.cast(),
                ln2_bias: layer.ln2_bias.cast(),
                w1: layer.w1.cast(),
                b1: layer.b1.cast(),
                w2: layer.w2.cast(),
                b2: layer.b2.cast(),
            });
        }
        out
    }

    pub(crate) fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let reference = Self::zeros(spec);
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Shape(format!("expected {} weight tensors, found {}", theirs.len(), ours.len())));
        }
        for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("weight #{i}: shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Adapter<T> {
    /// `A` drawn from a small Gaussian, `B` zero, so the initial delta is exactly zero.
    pub fn init(target: AdapterTarget, d_model: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut a = Tensor::zeros(&[d_model, rank]);
        fill_normal(&mut a, 1.0 / (d_model as f64).sqrt(), rng);
        Adapter { target, a, b: Tensor::zeros(&[rank, d_model]) }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter { target: self.target, a: self.a.cast(), b: self.b.cast() }
    }

    pub fn zeros_like(&self) -> Self {
        Adapter { target: self.target, a: Tensor::zeros(self.a.shape()), b: Tensor::zeros(self.b.shape()) }
    }
}

impl<T: Scalar> LayerAdapters<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.query.a, &self.query.b, &self.value.a, &self.value.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.query.a, &mut self.query.b, &mut self.value.a, &mut self.value.b]
    }

    pub fn cast<U: Scalar>(&self) -> LayerAdapters<U> {
        LayerAdapters { query: self.query.cast(), value: self.value.cast() }
    }

    pub fn zeros_like(&self) -> Self {
        LayerAdapters { query: self.query.zeros_like(), value: self.value.zeros_like() }
    }
}

/// `base + A·B`; a rank-0 adapter returns `base` unchanged.
pub fn apply_adapter<T: Scalar>(base: &Tensor<T>, adapter: &Adapter<T>) -> Result<Tensor<T>> {
    let (rows, cols) = base.expect_matrix("adapter base")?;
    let (ar, rank) = adapter.a.expect_matrix("adapter A")?;
    let (br, bc) = adapter.b.expect_matrix("adapter B")?;
    if rows != cols || ar != rows || br != rank || bc != cols {
        return Err(Error::Shape(format!(
            "adapter: base {:?}, A {:?}, B {:?}",
            base.shape(),
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    if rank == 0 {
        return Ok(base.clone());
    }
    base.add(&adapter.a.matmul(&adapter.b)?)
}

pub(crate) fn fill_normal<T: Scalar>(t: &mut Tensor<T>, std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in t.data_mut() {
        *v = T::of(normal.sample(rng));
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapter(d: usize, r: usize, seed: u64) -> Adapter<f64> {
        let mut rng = seeded_rng(seed);
        let mut ad = Adapter::init(AdapterTarget::Query, d, r, &mut rng);
        fill_normal(&mut ad.b, 0.5, &mut rng);
        ad
    }

    #[test]
    fn rank_zero_is_identity() {
        let mut rng = seeded_rng(1);
        let mut base = Tensor::<f64>::zeros(&[4, 4]);
        fill_normal(&mut base, 1.0, &mut rng);
        let ad = adapter(4, 0, 2);
        assert_eq!(apply_adapter(&base, &ad).unwrap(), base);
    }

    #[test]
    fn zero_b_is_identity() {
        let mut rng = seeded_rng(3);
        let mut base = Tensor::<f64>::zeros(&[4, 4]);
        fill_normal(&mut base, 1.0, &mut rng);
        let ad = Adapter::init(AdapterTarget::Value, 4, 2, &mut rng);
        assert_eq!(apply_adapter(&base, &ad).unwrap(), base);
    }

    #[test]
    fn matches_explicit_product() {
        let mut rng = seeded_rng(5);
        let mut base = Tensor::<f64>::zeros(&[4, 4]);
        fill_normal(&mut base, 1.0, &mut rng);
        let ad = adapter(4, 2, 6);
        let merged = apply_adapter(&base, &ad).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut expect = base.at(i, j);
                for k in 0..2 {
                    expect += ad.a.at(i, k) * ad.b.at(k, j);
                }
                assert!((merged.at(i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let base = Tensor::<f64>::zeros(&[4, 4]);
        let ad = adapter(3, 2, 1);
        assert!(matches!(apply_adapter(&base, &ad), Err(Error::Shape(_))));
    }
}
