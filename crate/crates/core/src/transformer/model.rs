use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::{dot, normalize_into, softmax_into, vecmat, Tensor, LAYER_NORM_EPS};
use crate::numkit::gelu;
use crate::scalar::Scalar;
use crate::transformer::weights::{seeded_rng, Adapter, AdapterTarget, BaseWeights, LayerAdapters};
use crate::transformer::ModelSpec;

/// Predecessor state per fused layer (1-based successor layer index).
pub type FusionInput<T> = BTreeMap<usize, Tensor<T>>;

/// Decoder-only transformer with per-layer state taps and fusion injection points.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    spec: ModelSpec,
    base: BaseWeights<T>,
    adapters: Vec<LayerAdapters<T>>,
}

impl<T: Scalar> Transformer<T> {
    /// Randomly initialized model; adapters are attached when `adapter_rank > 0`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(spec.seed);
        let base = BaseWeights::init(&spec, &mut rng);
        let adapters = if spec.adapter_rank == 0 {
            Vec::new()
        } else {
            (0..spec.n_layers)
                .map(|_| LayerAdapters {
                    query: Adapter::init(AdapterTarget::Query, spec.d_model, spec.adapter_rank, &mut rng),
                    value: Adapter::init(AdapterTarget::Value, spec.d_model, spec.adapter_rank, &mut rng),
                })
                .collect()
        };
        Ok(Transformer { spec, base, adapters })
    }

    pub fn from_parts(spec: ModelSpec, base: BaseWeights<T>, adapters: Vec<LayerAdapters<T>>) -> Result<Self> {
        spec.validate()?;
        base.check_shapes(&spec)?;
        let expected = if spec.adapter_rank == 0 { 0 } else { spec.n_layers };
        if adapters.len() != expected {
            return Err(Error::Shape(format!("expected {expected} adapter sets, found {}", adapters.len())));
        }
        for set in &adapters {
            for ad in [&set.query, &set.value] {
                if ad.a.shape() != [spec.d_model, spec.adapter_rank] || ad.b.shape() != [spec.adapter_rank, spec.d_model]
                {
                    return Err(Error::Shape(format!(
                        "adapter shapes {:?}/{:?} do not match rank {}",
                        ad.a.shape(),
                        ad.b.shape(),
                        spec.adapter_rank
                    )));
                }
            }
        }
        Ok(Transformer { spec, base, adapters })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn base(&self) -> &BaseWeights<T> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut BaseWeights<T> {
        &mut self.base
    }

    pub fn adapters(&self) -> &[LayerAdapters<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LayerAdapters<T>] {
        &mut self.adapters
    }

    /// With adapters attached only they are trained; otherwise every base weight is.
    pub fn trains_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        if self.trains_adapters() {
            self.adapters.iter().flat_map(|a| a.tensors()).collect()
        } else {
            self.base.tensors()
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        if self.trains_adapters() {
            self.adapters.iter_mut().flat_map(|a| a.tensors_mut()).collect()
        } else {
            self.base.tensors_mut()
        }
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            spec: self.spec.clone(),
            base: self.base.cast(),
            adapters: self.adapters.iter().map(|a| a.cast()).collect(),
        }
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.spec.n_layers, self.spec.d_model)
    }

    /// Starts one decoding step at position `cache.len()`.
    pub fn begin_step<'a>(&'a self, cache: &'a mut KvCache<T>, token: usize) -> Result<StepCursor<'a, T>> {
        self.begin(cache, token, false)
    }

    fn begin<'a>(&'a self, cache: &'a mut KvCache<T>, token: usize, record: bool) -> Result<StepCursor<'a, T>> {
        let spec = &self.spec;
        if token >= spec.vocab {
            return Err(Error::Range(format!("token id {token} >= vocab {}", spec.vocab)));
        }
        if cache.n_layers() != spec.n_layers || cache.width != spec.d_model {
            return Err(Error::Shape("cache does not belong to this model".into()));
        }
        let pos = cache.len();
        if pos >= spec.max_steps {
            return Err(Error::Range(format!("position {pos} exceeds max_steps {}", spec.max_steps)));
        }
        let h: Vec<T> =
            self.base.tok_emb.row(token).iter().zip(self.base.pos_emb.row(pos)).map(|(&a, &b)| a + b).collect();
        Ok(StepCursor {
            model: self,
            cache,
            pos,
            states: vec![Tensor::vector(h.clone())],
            h,
            pending: Vec::with_capacity(spec.n_layers),
            record: record.then(|| StepRecord { token, layers: Vec::new(), final_hat: Vec::new(), final_inv: T::zero(), final_out: Vec::new() }),
        })
    }
}

/// Per-layer keys and values for every committed position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    width: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, width: usize) -> Self {
        KvCache { width, keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Number of cached positions in one layer.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.width
    }

    #[inline]
    fn key(&self, layer: usize, pos: usize) -> &[T] {
        &self.keys[layer][pos * self.width..(pos + 1) * self.width]
    }

    #[inline]
    fn value(&self, layer: usize, pos: usize) -> &[T] {
        &self.values[layer][pos * self.width..(pos + 1) * self.width]
    }
}

/// Output of one completed decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub logits: Tensor<T>,
    /// Index 0 is the embedding output; index `l` the state after layer `l`.
    pub layer_states: Vec<Tensor<T>>,
}

/// A decoding step in progress, advanced one layer at a time.
///
/// Keys and values are held back until [`StepCursor::finish`], so every layer
/// of the cache always covers the same number of positions.
pub struct StepCursor<'a, T> {
    model: &'a Transformer<T>,
    cache: &'a mut KvCache<T>,
    pos: usize,
    h: Vec<T>,
    pending: Vec<(Vec<T>, Vec<T>)>,
    states: Vec<Tensor<T>>,
    record: Option<StepRecord<T>>,
}

impl<'a, T: Scalar> StepCursor<'a, T> {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// 1-based index of the next layer to run.
    pub fn next_layer(&self) -> usize {
        self.pending.len() + 1
    }

    pub fn is_done(&self) -> bool {
        self.pending.len() == self.model.spec.n_layers
    }

    /// State after the most recently completed layer (embedding output first).
    pub fn current(&self) -> &Tensor<T> {
        self.states.last().expect("embedding state present")
    }

    /// Runs the next layer. `fusion` carries the predecessor's state for a
    /// fused layer; `None` runs the standard pre-norm block.
    pub fn advance(&mut self, fusion: Option<&Tensor<T>>) -> Result<&Tensor<T>> {
        let layer = self.next_layer();
        if layer > self.model.spec.n_layers {
            return Err(Error::Contract(format!("all {} layers already computed", self.model.spec.n_layers)));
        }
        if let Some(f) = fusion {
            if f.shape() != [self.model.spec.d_model] {
                return Err(Error::Shape(format!(
                    "fusion input for layer {layer} has shape {:?}, expected [{}]",
                    f.shape(),
                    self.model.spec.d_model
                )));
            }
        }
        let mut rec = self.record.as_ref().map(|_| LayerRecord::default());
        let (h, k, v) =
            run_layer(self.model, layer - 1, &self.h, fusion.map(|f| f.data()), self.cache, self.pos, &self.pending, rec.as_mut());
        if let (Some(step), Some(rec)) = (self.record.as_mut(), rec) {
            step.layers.push(rec);
        }
        self.pending.push((k, v));
        self.h = h;
        self.states.push(Tensor::vector(self.h.clone()));
        Ok(self.current())
    }

    /// Computes logits and commits this position's keys/values to the cache.
    pub fn finish(self) -> Result<StepOutput<T>> {
        self.finish_recorded().map(|(out, _)| out)
    }

    fn finish_recorded(mut self) -> Result<(StepOutput<T>, Option<StepRecord<T>>)> {
        if !self.is_done() {
            return Err(Error::Contract(format!(
                "step finished after {} of {} layers",
                self.pending.len(),
                self.model.spec.n_layers
            )));
        }
        let base = &self.model.base;
        let d = self.model.spec.d_model;
        let mut hat = vec![T::zero(); d];
        let inv = normalize_into(&self.h, T::of(LAYER_NORM_EPS), &mut hat);
        let n: Vec<T> = affine(&hat, base.lnf_gain.data(), base.lnf_bias.data());
        let mut logits = vec![T::zero(); self.model.spec.vocab];
        vecmat(&n, base.unembed.data(), &mut logits);
        for (layer, (k, v)) in self.pending.drain(..).enumerate() {
            self.cache.keys[layer].extend_from_slice(&k);
            self.cache.values[layer].extend_from_slice(&v);
        }
        self.cache.len += 1;
        if let Some(rec) = self.record.as_mut() {
            rec.final_hat = hat;
            rec.final_inv = inv;
            rec.final_out = n;
        }
        Ok((StepOutput { logits: Tensor::vector(logits), layer_states: self.states }, self.record))
    }
}

#[inline]
fn affine<T: Scalar>(hat: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    hat.iter().zip(gain).zip(bias).map(|((&x, &g), &b)| g * x + b).collect()
}

/// Activations kept for the backward pass of one layer at one position.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerRecord<T> {
    pub fused: bool,
    /// Normalized attention input (LN1 for standard layers, the fused sum otherwise).
    pub attn_hat: Vec<T>,
    pub attn_inv: T,
    pub attn_in: Vec<T>,
    pub q: Vec<T>,
    pub q_low: Vec<T>,
    pub v_low: Vec<T>,
    /// Attention weights, `n_heads × (pos + 1)`.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub res_hat: Vec<T>,
    pub res_inv: T,
    pub mlp_hat: Vec<T>,
    pub mlp_inv: T,
    pub mlp_in: Vec<T>,
    pub pre_act: Vec<T>,
    pub act: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepRecord<T> {
    pub token: usize,
    pub layers: Vec<LayerRecord<T>>,
    pub final_hat: Vec<T>,
    pub final_inv: T,
    pub final_out: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn run_layer<T: Scalar>(
    model: &Transformer<T>,
    layer: usize,
    x: &[T],
    pred: Option<&[T]>,
    cache: &KvCache<T>,
    pos: usize,
    pending: &[(Vec<T>, Vec<T>)],
    rec: Option<&mut LayerRecord<T>>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    debug_assert_eq!(pending.len(), layer);
    let spec = &model.spec;
    let w = &model.base.layers[layer];
    let d = spec.d_model;
    let eps = T::of(LAYER_NORM_EPS);

    // attention input: LN1(x), or the unit-gain LayerNorm of own + predecessor state
    let mut attn_hat = vec![T::zero(); d];
    let (attn_in, attn_inv) = match pred {
        Some(p) => {
            let sum: Vec<T> = x.iter().zip(p).map(|(&a, &b)| a + b).collect();
            let inv = normalize_into(&sum, eps, &mut attn_hat);
            (attn_hat.clone(), inv)
        }
        None => {
            let inv = normalize_into(x, eps, &mut attn_hat);
            (affine(&attn_hat, w.ln1_gain.data(), w.ln1_bias.data()), inv)
        }
    };

    let mut q = vec![T::zero(); d];
    let mut k = vec![T::zero(); d];
    let mut v = vec![T::zero(); d];
    vecmat(&attn_in, w.wq.data(), &mut q);
    vecmat(&attn_in, w.wk.data(), &mut k);
    vecmat(&attn_in, w.wv.data(), &mut v);
    let (mut q_low, mut v_low) = (Vec::new(), Vec::new());
    if let Some(ad) = model.adapters.get(layer) {
        q_low = low_rank_add(&attn_in, &ad.query, &mut q);
        v_low = low_rank_add(&attn_in, &ad.value, &mut v);
    }

    // causal attention over the committed prefix plus this position
    let heads = spec.n_heads;
    let hd = spec.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let span = pos + 1;
    let mut probs = vec![T::zero(); heads * span];
    let mut ctx = vec![T::zero(); d];
    let mut scores = vec![T::zero(); span];
    for head in 0..heads {
        let r = head * hd..(head + 1) * hd;
        for (j, s) in scores.iter_mut().enumerate() {
            let key = if j < pos { cache.key(layer, j) } else { &k };
            *s = dot(&q[r.clone()], &key[r.clone()]) * scale;
        }
        let p = &mut probs[head * span..(head + 1) * span];
        softmax_into(&scores, p);
        let out = &mut ctx[r.clone()];
        for (j, &pj) in p.iter().enumerate() {
            let val = if j < pos { cache.value(layer, j) } else { &v };
            for (o, &vv) in out.iter_mut().zip(&val[r.clone()]) {
                *o += pj * vv;
            }
        }
    }
    let mut attn_out = vec![T::zero(); d];
    vecmat(&ctx, w.wo.data(), &mut attn_out);

    let mut res_hat = Vec::new();
    let mut res_inv = T::zero();
    let y: Vec<T> = if pred.is_some() {
        let sum: Vec<T> = attn_out.iter().zip(&attn_in).map(|(&a, &b)| a + b).collect();
        res_hat = vec![T::zero(); d];
        res_inv = normalize_into(&sum, eps, &mut res_hat);
        affine(&res_hat, w.ln_res_gain.data(), w.ln_res_bias.data())
    } else {
        x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect()
    };

    let mut mlp_hat = vec![T::zero(); d];
    let mlp_inv = normalize_into(&y, eps, &mut mlp_hat);
    let mlp_in = affine(&mlp_hat, w.ln2_gain.data(), w.ln2_bias.data());
    let mut pre_act = vec![T::zero(); spec.d_ff];
    vecmat(&mlp_in, w.w1.data(), &mut pre_act);
    for (a, &b) in pre_act.iter_mut().zip(w.b1.data()) {
        *a += b;
    }
    let act: Vec<T> = pre_act.iter().map(|&u| gelu(u)).collect();
    let mut ff = vec![T::zero(); d];
    vecmat(&act, w.w2.data(), &mut ff);
    let h: Vec<T> = y.iter().zip(&ff).zip(w.b2.data()).map(|((&a, &f), &b)| a + (f + b)).collect();

    if let Some(rec) = rec {
        *rec = LayerRecord {
            fused: pred.is_some(),
            attn_hat,
            attn_inv,
            attn_in,
            q,
            q_low,
            v_low,
            probs,
            ctx,
            res_hat,
            res_inv,
            mlp_hat,
            mlp_inv,
            mlp_in,
            pre_act,
            act,
        };
    }
    (h, k, v)
}

/// `out += (x·A)·B`; returns the rank-`r` intermediate `x·A`.
fn low_rank_add<T: Scalar>(x: &[T], ad: &Adapter<T>, out: &mut [T]) -> Vec<T> {
    let rank = ad.rank();
    let mut low = vec![T::zero(); rank];
    vecmat(x, ad.a.data(), &mut low);
    let mut delta = vec![T::zero(); out.len()];
    vecmat(&low, ad.b.data(), &mut delta);
    for (o, dv) in out.iter_mut().zip(delta) {
        *o += dv;
    }
    low
}

/// One decoding step. With `fusion_in` present, every fused layer
/// (`l % fusion_period == 0`) must have an entry and no other layer may.
pub fn forward_step<T: Scalar>(
    model: &Transformer<T>,
    token: usize,
    cache: &mut KvCache<T>,
    fusion_in: Option<&FusionInput<T>>,
) -> Result<StepOutput<T>> {
    if let Some(map) = fusion_in {
        check_fusion_map(model.spec(), map)?;
    }
    let mut cursor = model.begin_step(cache, token)?;
    while !cursor.is_done() {
        let layer = cursor.next_layer();
        cursor.advance(fusion_in.and_then(|m| m.get(&layer)))?;
    }
    cursor.finish()
}

pub(crate) fn check_fusion_map<T: Scalar>(spec: &ModelSpec, map: &FusionInput<T>) -> Result<()> {
    for layer in spec.fusion_layers() {
        if !map.contains_key(&layer) {
            return Err(Error::Contract(format!("missing fusion vector for layer {layer}")));
        }
    }
    if let Some(extra) = map.keys().find(|&&l| !spec.is_fusion_layer(l)) {
        return Err(Error::Contract(format!("fusion vector supplied for non-fusion layer {extra}")));
    }
    Ok(())
}

/// Hidden states and logits collected over a teacher-forced sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    /// `states[t][l]` is the state after layer `l` at step `t` (`l = 0` is the embedding).
    pub states: Vec<Vec<Tensor<T>>>,
    pub logits: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn push(&mut self, out: StepOutput<T>) {
        self.states.push(out.layer_states);
        self.logits.push(out.logits);
    }
}

/// Teacher-forced forward pass: a fold of [`forward_step`] over `tokens`.
pub fn forward_teacher<T: Scalar>(
    model: &Transformer<T>,
    tokens: &[usize],
    fusion_in: Option<&[FusionInput<T>]>,
) -> Result<LayerTrace<T>> {
    check_sequence(model, tokens, fusion_in)?;
    let mut cache = model.new_cache();
    let mut trace = LayerTrace { states: Vec::with_capacity(tokens.len()), logits: Vec::with_capacity(tokens.len()) };
    for (t, &tok) in tokens.iter().enumerate() {
        let out = forward_step(model, tok, &mut cache, fusion_in.map(|f| &f[t]))?;
        trace.push(out);
    }
    Ok(trace)
}

fn check_sequence<T: Scalar>(model: &Transformer<T>, tokens: &[usize], fusion_in: Option<&[FusionInput<T>]>) -> Result<()> {
    if tokens.len() > model.spec.max_steps {
        return Err(Error::Range(format!(
            "sequence length {} exceeds max_steps {}",
            tokens.len(),
            model.spec.max_steps
        )));
    }
    if let Some(f) = fusion_in {
        if f.len() != tokens.len() {
            return Err(Error::Contract(format!("fusion trace covers {} steps, sequence has {}", f.len(), tokens.len())));
        }
    }
    Ok(())
}

/// Activations of a full teacher-forced pass, consumed by [`backward`](crate::transformer::backward).
#[derive(Debug, Clone)]
pub struct SequenceTape<T> {
    pub(crate) steps: Vec<StepRecord<T>>,
    pub(crate) cache: KvCache<T>,
}

impl<T> SequenceTape<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Same computation as [`forward_teacher`], additionally recording activations.
pub fn forward_with_tape<T: Scalar>(
    model: &Transformer<T>,
    tokens: &[usize],
    fusion_in: Option<&[FusionInput<T>]>,
) -> Result<(LayerTrace<T>, SequenceTape<T>)> {
    check_sequence(model, tokens, fusion_in)?;
    let mut cache = model.new_cache();
    let mut trace = LayerTrace { states: Vec::with_capacity(tokens.len()), logits: Vec::with_capacity(tokens.len()) };
    let mut steps = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let map = fusion_in.map(|f| &f[t]);
        if let Some(m) = map {
            check_fusion_map(&model.spec, m)?;
        }
        let mut cursor = model.begin(&mut cache, tok, true)?;
        while !cursor.is_done() {
            let layer = cursor.next_layer();
            cursor.advance(map.and_then(|m| m.get(&layer)))?;
        }
        let (out, rec) = cursor.finish_recorded()?;
        trace.push(out);
        steps.push(rec.expect("recording enabled"));
    }
    Ok((trace, SequenceTape { steps, cache }))
}

impl<T: Scalar> SequenceTape<T> {
    pub(crate) fn key(&self, layer: usize, pos: usize) -> &[T] {
        self.cache.key(layer, pos)
    }

    pub(crate) fn value(&self, layer: usize, pos: usize) -> &[T] {
        self.cache.value(layer, pos)
    }
}
