//! Attention-based pooling of fused patch vectors into one bag vector, and
//! the linear head that maps the bag vector to hazard logits.
//!
//! With M=1 channels and pass-through fusion this is the classic gated-ABMIL
//! baseline over single-stain slides.

use crate::error::{Error, Result};
use crate::fusion::{linear_apply, Linear, LinearVars};
use crate::numerics::{Graph, Scalar, Tensor, VarId};
use rand::Rng;

/// Double-gated attention parameters: score s_k = w'(tanh(V h_k) * sigm(U h_k)).
#[derive(Debug, Clone)]
pub struct GatedAttentionParams<S: Scalar> {
    /// d_emb -> d_att
    pub v: Linear<S>,
    /// d_emb -> d_att
    pub u: Linear<S>,
    /// d_att -> 1
    pub w: Linear<S>,
}

impl<S: Scalar> GatedAttentionParams<S> {
    pub fn init<R: Rng>(d_emb: usize, d_att: usize, rng: &mut R) -> Result<Self> {
        if d_emb == 0 || d_att == 0 {
            return Err(Error::contract("d_emb and d_att must be >= 1"));
        }
        Ok(GatedAttentionParams {
            v: Linear::init(d_emb, d_att, true, rng),
            u: Linear::init(d_emb, d_att, true, rng),
            w: Linear::init(d_att, 1, true, rng),
        })
    }

    pub fn d_emb(&self) -> usize {
        self.v.in_dim()
    }

    pub fn d_att(&self) -> usize {
        self.v.out_dim()
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<GatedAttentionVars> {
        Ok(GatedAttentionVars {
            v: self.v.bind(g, trainable)?,
            u: self.u.bind(g, trainable)?,
            w: self.w.bind(g, trainable)?,
        })
    }

    pub fn cast<T: Scalar>(&self) -> GatedAttentionParams<T> {
        GatedAttentionParams {
            v: self.v.cast(),
            u: self.u.cast(),
            w: self.w.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatedAttentionVars {
    pub v: LinearVars,
    pub u: LinearVars,
    pub w: LinearVars,
}

/// Everything the head produces for one bag.
#[derive(Debug, Clone)]
pub struct PoolOutput<S: Scalar> {
    /// `[d_emb]`
    pub h_bag: Tensor<S>,
    /// `[K]` patch attention; sums to 1.
    pub a: Tensor<S>,
    /// `[N_bin]`
    pub logits: Tensor<S>,
}

/// Patch attention `a: [K]` from fused vectors `h_hat: [K, d_emb]`.
pub fn gated_attention_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &GatedAttentionVars,
    h_hat: VarId,
) -> Result<VarId> {
    let shape = g.shape(h_hat).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("gated attention expects [K,d_emb], got {shape:?}")));
    }
    let k = shape[0];
    let vh = linear_apply(g, &vars.v, h_hat)?;
    let vh = g.tanh(vh)?;
    let uh = linear_apply(g, &vars.u, h_hat)?;
    let uh = g.sigm(uh)?;
    let gate = g.hadamard(vh, uh)?;
    let scores = linear_apply(g, &vars.w, gate)?;
    let scores = g.reshape(scores, vec![k])?;
    g.softmax(scores, 0)
}

/// `h_bag = sum_k a_k h_hat_k`, shape `[d_emb]`.
pub fn pool_graph<S: Scalar>(g: &mut Graph<S>, a: VarId, h_hat: VarId) -> Result<VarId> {
    let (k, d) = {
        let s = g.shape(h_hat);
        if s.len() != 2 {
            return Err(Error::dim(format!("pool expects [K,d_emb], got {s:?}")));
        }
        (s[0], s[1])
    };
    if g.shape(a) != [k] {
        return Err(Error::dim(format!(
            "attention shape {:?} does not match K = {k}",
            g.shape(a)
        )));
    }
    let row = g.reshape(a, vec![1, k])?;
    let bag = g.matmul(row, h_hat)?;
    g.reshape(bag, vec![d])
}

/// `logits = W h_bag + b`, shape `[N_bin]`.
pub fn classify_graph<S: Scalar>(
    g: &mut Graph<S>,
    head: &LinearVars,
    h_bag: VarId,
) -> Result<VarId> {
    let d = {
        let s = g.shape(h_bag);
        if s.len() != 1 {
            return Err(Error::dim(format!("classify expects [d_emb], got {s:?}")));
        }
        s[0]
    };
    let n_out = g.shape(head.weight)[1];
    let row = g.reshape(h_bag, vec![1, d])?;
    let logits = linear_apply(g, head, row)?;
    g.reshape(logits, vec![n_out])
}

/// Attention, pooling, and the head in one pass. Returns `(a, h_bag, logits)`.
pub fn attend_pool_classify_graph<S: Scalar>(
    g: &mut Graph<S>,
    attn: &GatedAttentionVars,
    head: &LinearVars,
    h_hat: VarId,
) -> Result<(VarId, VarId, VarId)> {
    let a = gated_attention_graph(g, attn, h_hat)?;
    let h_bag = pool_graph(g, a, h_hat)?;
    let logits = classify_graph(g, head, h_bag)?;
    Ok((a, h_bag, logits))
}

/// Plain-tensor patch attention.
pub fn gated_attention<S: Scalar>(
    h_hat: &Tensor<S>,
    params: &GatedAttentionParams<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let h = g.constant(h_hat.clone())?;
    let a = gated_attention_graph(&mut g, &vars, h)?;
    Ok(g.value(a).clone())
}

/// Plain-tensor weighted bag vector.
pub fn pool<S: Scalar>(h_hat: &Tensor<S>, params: &GatedAttentionParams<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let h = g.constant(h_hat.clone())?;
    let a = gated_attention_graph(&mut g, &vars, h)?;
    let bag = pool_graph(&mut g, a, h)?;
    Ok(g.value(bag).clone())
}

/// Plain-tensor head application.
pub fn classify<S: Scalar>(h_bag: &Tensor<S>, head: &Linear<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = head.bind(&mut g, false)?;
    let h = g.constant(h_bag.clone())?;
    let logits = classify_graph(&mut g, &vars, h)?;
    Ok(g.value(logits).clone())
}

/// Full bag-level forward on plain tensors.
pub fn pool_forward<S: Scalar>(
    h_hat: &Tensor<S>,
    params: &GatedAttentionParams<S>,
    head: &Linear<S>,
) -> Result<PoolOutput<S>> {
    let mut g = Graph::new();
    let attn_vars = params.bind(&mut g, false)?;
    let head_vars = head.bind(&mut g, false)?;
    let h = g.constant(h_hat.clone())?;
    let (a, h_bag, logits) = attend_pool_classify_graph(&mut g, &attn_vars, &head_vars, h)?;
    Ok(PoolOutput {
        h_bag: g.value(h_bag).clone(),
        a: g.value(a).clone(),
        logits: g.value(logits).clone(),
    })
}
