use crate::error::{Error, Result};
use crate::numkit::{dot, gelu_grad, matvec_acc, normalize_backward, outer_acc, Tensor};
use crate::scalar::Scalar;
use crate::transformer::model::{SequenceTape, Transformer};
use crate::transformer::weights::{BaseWeights, LayerAdapters};

/// Parameter gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Present when base weights were differentiated.
    pub base: Option<BaseWeights<T>>,
    /// One set per layer when the model carries adapters.
    pub adapters: Vec<LayerAdapters<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(model: &Transformer<T>, include_base: bool) -> Self {
        Gradients {
            base: include_base.then(|| BaseWeights::zeros(model.spec())),
            adapters: model.adapters().iter().map(|a| a.zeros_like()).collect(),
        }
    }

    /// Zeros matching what training differentiates for `model`.
    pub fn for_training(model: &Transformer<T>) -> Self {
        Self::zeros(model, !model.trains_adapters())
    }

    /// Gradients aligned with [`Transformer::trainable`].
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        if !self.adapters.is_empty() {
            self.adapters.iter().flat_map(|a| a.tensors()).collect()
        } else {
            self.base.as_ref().map(|b| b.tensors()).unwrap_or_default()
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        if !self.adapters.is_empty() {
            self.adapters.iter_mut().flat_map(|a| a.tensors_mut()).collect()
        } else {
            self.base.as_mut().map(|b| b.tensors_mut()).unwrap_or_default()
        }
    }

    /// Euclidean norm over the trainable gradients.
    pub fn norm(&self) -> T {
        self.trainable().iter().flat_map(|t| t.data()).map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for t in self.trainable_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Reverse pass over a recorded sequence.
///
/// `dlogits[t]` is the loss gradient with respect to the logits at step `t`.
/// Base-weight gradients are computed when `include_base` is set; adapter
/// gradients whenever the model has adapters.
pub fn backward<T: Scalar>(
    model: &Transformer<T>,
    tape: &SequenceTape<T>,
    dlogits: &[Tensor<T>],
    include_base: bool,
) -> Result<Gradients<T>> {
    let mut grads = Gradients::zeros(model, include_base);
    backward_accumulate(model, tape, dlogits, &mut grads)?;
    Ok(grads)
}

/// [`backward`] adding into existing gradients.
pub fn backward_accumulate<T: Scalar>(
    model: &Transformer<T>,
    tape: &SequenceTape<T>,
    dlogits: &[Tensor<T>],
    grads: &mut Gradients<T>,
) -> Result<()> {
    let spec = model.spec();
    let steps = tape.len();
    if dlogits.len() != steps {
        return Err(Error::Shape(format!("{} logit gradients for {} steps", dlogits.len(), steps)));
    }
    if let Some(bad) = dlogits.iter().find(|g| g.shape() != [spec.vocab]) {
        return Err(Error::Shape(format!("logit gradient shape {:?}, expected [{}]", bad.shape(), spec.vocab)));
    }
    if grads.adapters.len() != model.adapters().len() {
        return Err(Error::Shape("gradient buffers do not match the model's adapters".into()));
    }
    let d = spec.d_model;
    let base = model.base();
    let mut gb = grads.base.as_mut();
    let ga = &mut grads.adapters;

    // final LayerNorm and unembedding
    let mut dh: Vec<Vec<T>> = Vec::with_capacity(steps);
    for (rec, dz) in tape.steps.iter().zip(dlogits) {
        let mut dn = vec![T::zero(); d];
        matvec_acc(base.unembed.data(), dz.data(), &mut dn);
        if let Some(g) = gb.as_mut() {
            outer_acc(&rec.final_out, dz.data(), g.unembed.data_mut());
        }
        let mut dx = vec![T::zero(); d];
        ln_affine_backward(
            &rec.final_hat,
            rec.final_inv,
            &dn,
            base.lnf_gain.data(),
            gb.as_mut().map(|g| (&mut g.lnf_gain, &mut g.lnf_bias)),
            &mut dx,
        );
        dh.push(dx);
    }

    let heads = spec.n_heads;
    let hd = spec.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    for layer in (0..spec.n_layers).rev() {
        let w = &base.layers[layer];
        let mut gl = gb.as_mut().map(|g| &mut g.layers[layer]);
        let mut dctx = Vec::with_capacity(steps);
        let mut d_attn_in = Vec::with_capacity(steps);
        let mut dx_all = Vec::with_capacity(steps);
        for (t, step) in tape.steps.iter().enumerate() {
            let rec = &step.layers[layer];
            let dout = &dh[t];
            // h = y + W2·gelu(W1·LN2(y) + b1) + b2
            let mut dy = dout.clone();
            let mut dact = vec![T::zero(); spec.d_ff];
            matvec_acc(w.w2.data(), dout, &mut dact);
            let dpre: Vec<T> = dact.iter().zip(&rec.pre_act).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let mut dm = vec![T::zero(); d];
            matvec_acc(w.w1.data(), &dpre, &mut dm);
            if let Some(g) = gl.as_deref_mut() {
                add_into(g.b2.data_mut(), dout);
                outer_acc(&rec.act, dout, g.w2.data_mut());
                add_into(g.b1.data_mut(), &dpre);
                outer_acc(&rec.mlp_in, &dpre, g.w1.data_mut());
            }
            ln_affine_backward(
                &rec.mlp_hat,
                rec.mlp_inv,
                &dm,
                w.ln2_gain.data(),
                gl.as_deref_mut().map(|g| (&mut g.ln2_gain, &mut g.ln2_bias)),
                &mut dy,
            );

            // y = x + o, or y = LN_res(o + attn_in) on fused layers
            let (d_o, da, dx) = if rec.fused {
                let mut dsum = vec![T::zero(); d];
                ln_affine_backward(
                    &rec.res_hat,
                    rec.res_inv,
                    &dy,
                    w.ln_res_gain.data(),
                    gl.as_deref_mut().map(|g| (&mut g.ln_res_gain, &mut g.ln_res_bias)),
                    &mut dsum,
                );
                (dsum.clone(), dsum, vec![T::zero(); d])
            } else {
                (dy.clone(), vec![T::zero(); d], dy)
            };
            let mut dc = vec![T::zero(); d];
            matvec_acc(w.wo.data(), &d_o, &mut dc);
            if let Some(g) = gl.as_deref_mut() {
                outer_acc(&rec.ctx, &d_o, g.wo.data_mut());
            }
            dctx.push(dc);
            d_attn_in.push(da);
            dx_all.push(dx);
        }

        // attention over all positions
        let mut dq = vec![vec![T::zero(); d]; steps];
        let mut dk = vec![vec![T::zero(); d]; steps];
        let mut dv = vec![vec![T::zero(); d]; steps];
        for t in 0..steps {
            let rec = &tape.steps[t].layers[layer];
            let span = t + 1;
            let mut dp = vec![T::zero(); span];
            for head in 0..heads {
                let r = head * hd..(head + 1) * hd;
                let p = &rec.probs[head * span..(head + 1) * span];
                let g_ctx = &dctx[t][r.clone()];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = dot(g_ctx, &tape.value(layer, j)[r.clone()]);
                    for (o, &gc) in dv[j][r.clone()].iter_mut().zip(g_ctx) {
                        *o += p[j] * gc;
                    }
                }
                let mean = dot(p, &dp);
                for j in 0..span {
                    let ds = p[j] * (dp[j] - mean) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let key = &tape.key(layer, j)[r.clone()];
                    for (o, &kv) in dq[t][r.clone()].iter_mut().zip(key) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk[j][r.clone()].iter_mut().zip(&rec.q[r.clone()]) {
                        *o += ds * qv;
                    }
                }
            }
        }

        // projections back to the attention input, then to the layer input
        let mut ad = ga.get_mut(layer);
        let adapters = model.adapters().get(layer);
        for t in 0..steps {
            let rec = &tape.steps[t].layers[layer];
            let da = &mut d_attn_in[t];
            matvec_acc(w.wq.data(), &dq[t], da);
            matvec_acc(w.wk.data(), &dk[t], da);
            matvec_acc(w.wv.data(), &dv[t], da);
            if let Some(g) = gl.as_deref_mut() {
                outer_acc(&rec.attn_in, &dq[t], g.wq.data_mut());
                outer_acc(&rec.attn_in, &dk[t], g.wk.data_mut());
                outer_acc(&rec.attn_in, &dv[t], g.wv.data_mut());
            }
            if let (Some(src), Some(g)) = (adapters, ad.as_deref_mut()) {
                for (a, ga, low, dproj) in
                    [(&src.query, &mut g.query, &rec.q_low, &dq[t]), (&src.value, &mut g.value, &rec.v_low, &dv[t])]
                {
                    outer_acc(low, dproj, ga.b.data_mut());
                    let mut dlow = vec![T::zero(); a.rank()];
                    matvec_acc(a.b.data(), dproj, &mut dlow);
                    outer_acc(&rec.attn_in, &dlow, ga.a.data_mut());
                    matvec_acc(a.a.data(), &dlow, da);
                }
            }
            let dx = &mut dx_all[t];
            if rec.fused {
                // the predecessor's state is a constant; only the own-state path flows back
                normalize_backward(&rec.attn_hat, rec.attn_inv, da, dx);
            } else {
                ln_affine_backward(
                    &rec.attn_hat,
                    rec.attn_inv,
                    da,
                    w.ln1_gain.data(),
                    gl.as_deref_mut().map(|g| (&mut g.ln1_gain, &mut g.ln1_bias)),
                    dx,
                );
            }
        }
        dh = dx_all;
    }

    if let Some(g) = gb.as_mut() {
        for (t, (step, dx)) in tape.steps.iter().zip(&dh).enumerate() {
            add_into(&mut g.tok_emb.data_mut()[step.token * d..(step.token + 1) * d], dx);
            add_into(&mut g.pos_emb.data_mut()[t * d..(t + 1) * d], dx);
        }
    }
    Ok(())
}

#[inline]
fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// Backward through `gain ⊙ normalize(x) + bias`, accumulating into `dx`.
fn ln_affine_backward<T: Scalar>(
    hat: &[T],
    inv: T,
    dout: &[T],
    gain: &[T],
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    dx: &mut [T],
) {
    if let Some((dg, db)) = grads {
        for ((g, &o), &h) in dg.data_mut().iter_mut().zip(dout).zip(hat) {
            *g += o * h;
        }
        add_into(db.data_mut(), dout);
    }
    let dhat: Vec<T> = dout.iter().zip(gain).map(|(&o, &g)| o * g).collect();
    normalize_backward(hat, inv, &dhat, dx);
}
