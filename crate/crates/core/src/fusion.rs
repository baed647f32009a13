//! Marker fusion: per patch, contract the M channel embeddings, attend across
//! channels with scaled dot-product attention, apply two residual +
//! marker-normalization stages around the inverted bottleneck, and mean-pool
//! over channels.
//!
//! Every stage exists in two forms: a graph builder (`*_graph`) used by
//! training, and a plain wrapper that runs the same builder on constants and
//! returns tensors, so there is exactly one implementation of the math.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, VarId};
use rand::Rng;

/// Bag of K patch embeddings, one `d_emb` vector per channel per patch.
#[derive(Debug, Clone)]
pub struct EmbeddedBag<S: Scalar> {
    pub sample_id: String,
    /// Channel names in storage order, length M.
    pub channel_names: Vec<String>,
    /// Patch-grid (row, col) indices, length K, unique per bag.
    pub coords: Vec<(u32, u32)>,
    /// `[K, M, d_emb]`
    pub h: Tensor<S>,
}

impl<S: Scalar> EmbeddedBag<S> {
    pub fn new(
        sample_id: String,
        channel_names: Vec<String>,
        coords: Vec<(u32, u32)>,
        h: Tensor<S>,
    ) -> Result<Self> {
        let shape = h.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!("bag tensor must be [K,M,d_emb], got {shape:?}")));
        }
        let (k, m, d) = (shape[0], shape[1], shape[2]);
        if k == 0 || m == 0 || d == 0 {
            return Err(Error::contract("bag requires K >= 1, M >= 1, d_emb >= 1"));
        }
        if coords.len() != k {
            return Err(Error::contract(format!("{} coords for {k} patches", coords.len())));
        }
        if channel_names.len() != m {
            return Err(Error::contract(format!(
                "{} channel names for {m} channels",
                channel_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &coords {
            if !seen.insert(c) {
                return Err(Error::contract(format!("duplicate patch coordinate {c:?}")));
            }
        }
        Ok(EmbeddedBag {
            sample_id,
            channel_names,
            coords,
            h,
        })
    }

    pub fn k(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn d_emb(&self) -> usize {
        self.h.shape()[2]
    }

    pub fn cast<T: Scalar>(&self) -> EmbeddedBag<T> {
        EmbeddedBag {
            sample_id: self.sample_id.clone(),
            channel_names: self.channel_names.clone(),
            coords: self.coords.clone(),
            h: self.h.cast(),
        }
    }
}

/// Fusion output: one fused vector per patch plus the per-patch channel
/// attention matrices.
#[derive(Debug, Clone)]
pub struct FusedBag<S: Scalar> {
    pub sample_id: String,
    pub coords: Vec<(u32, u32)>,
    /// `[K, d_emb]`
    pub h_hat: Tensor<S>,
    /// `[K, M, M]`; each row of each patch matrix sums to 1.
    pub attention: Tensor<S>,
}

/// Dense affine map stored as `weight: [in, out]` applied by `x @ W + b`.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform fan-in initialization in `(-1/sqrt(in), 1/sqrt(in))`; bias
    /// drawn from the same range when present.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![d_in, d_out], bound, rng),
            bias: bias.then(|| Tensor::uniform(vec![d_out], bound, rng)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<T: Scalar>(&self) -> Linear<T> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

/// Graph handles for one bound [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: VarId,
    pub bias: Option<VarId>,
}

impl<S: Scalar> Linear<S> {
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: g.leaf(self.weight.clone(), trainable)?,
            bias: match &self.bias {
                Some(b) => Some(g.leaf(b.clone(), trainable)?),
                None => None,
            },
        })
    }
}

/// Apply a bound linear map to `[R, in]` or `[B, R, in]` input.
pub fn linear_apply<S: Scalar>(g: &mut Graph<S>, vars: &LinearVars, x: VarId) -> Result<VarId> {
    let xs = g.shape(x).to_vec();
    let (d_in, d_out) = {
        let ws = g.shape(vars.weight);
        (ws[0], ws[1])
    };
    match xs.len() {
        2 => {
            if xs[1] != d_in {
                return Err(Error::dim(format!(
                    "linear input extent {} does not match weight in-dim {d_in}",
                    xs[1]
                )));
            }
            let mut y = g.matmul(x, vars.weight)?;
            if let Some(b) = vars.bias {
                y = g.add_last_dim(y, b)?;
            }
            Ok(y)
        }
        3 => {
            let flat = g.reshape(x, vec![xs[0] * xs[1], xs[2]])?;
            let y = linear_apply(g, vars, flat)?;
            g.reshape(y, vec![xs[0], xs[1], d_out])
        }
        other => Err(Error::dim(format!("linear expects rank 2 or 3 input, got rank {other}"))),
    }
}

/// Parameters of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionParams<S: Scalar> {
    /// d_emb -> d_hid
    pub bottleneck: Linear<S>,
    /// d_hid -> d_hid attention projections
    pub w_q: Linear<S>,
    pub w_k: Linear<S>,
    pub w_v: Linear<S>,
    /// d_hid -> d_emb
    pub inverse_bottleneck: Linear<S>,
    /// Affine parameters of the post-attention normalization, `[d_hid]`.
    pub gamma_sdpa: Tensor<S>,
    pub beta_sdpa: Tensor<S>,
    /// Affine parameters of the post-bottleneck normalization, `[d_emb]`.
    pub gamma_bottleneck: Tensor<S>,
    pub beta_bottleneck: Tensor<S>,
    /// Added to the standard deviation after the square root.
    pub eps: f64,
}

pub const NORM_EPS_DEFAULT: f64 = 1e-5;

impl<S: Scalar> FusionParams<S> {
    /// Fan-in uniform init for linears, gamma = 1 and beta = 0 for the norms.
    /// `attn_bias` toggles biases on the three attention projections.
    pub fn init<R: Rng>(
        d_emb: usize,
        d_hid: usize,
        attn_bias: bool,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_hid > d_emb {
            return Err(Error::contract(format!(
                "bottleneck must contract: d_hid {d_hid} > d_emb {d_emb}"
            )));
        }
        if d_emb == 0 || d_hid == 0 {
            return Err(Error::contract("d_emb and d_hid must be >= 1"));
        }
        Ok(FusionParams {
            bottleneck: Linear::init(d_emb, d_hid, true, rng),
            w_q: Linear::init(d_hid, d_hid, attn_bias, rng),
            w_k: Linear::init(d_hid, d_hid, attn_bias, rng),
            w_v: Linear::init(d_hid, d_hid, attn_bias, rng),
            inverse_bottleneck: Linear::init(d_hid, d_emb, true, rng),
            gamma_sdpa: Tensor::full(vec![d_hid], S::one()),
            beta_sdpa: Tensor::zeros(vec![d_hid]),
            gamma_bottleneck: Tensor::full(vec![d_emb], S::one()),
            beta_bottleneck: Tensor::zeros(vec![d_emb]),
            eps,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.bottleneck.in_dim()
    }

    pub fn d_hid(&self) -> usize {
        self.bottleneck.out_dim()
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<FusionVars> {
        Ok(FusionVars {
            bottleneck: self.bottleneck.bind(g, trainable)?,
            w_q: self.w_q.bind(g, trainable)?,
            w_k: self.w_k.bind(g, trainable)?,
            w_v: self.w_v.bind(g, trainable)?,
            inverse_bottleneck: self.inverse_bottleneck.bind(g, trainable)?,
            gamma_sdpa: g.leaf(self.gamma_sdpa.clone(), trainable)?,
            beta_sdpa: g.leaf(self.beta_sdpa.clone(), trainable)?,
            gamma_bottleneck: g.leaf(self.gamma_bottleneck.clone(), trainable)?,
            beta_bottleneck: g.leaf(self.beta_bottleneck.clone(), trainable)?,
            eps: self.eps,
        })
    }

    pub fn cast<T: Scalar>(&self) -> FusionParams<T> {
        FusionParams {
            bottleneck: self.bottleneck.cast(),
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            inverse_bottleneck: self.inverse_bottleneck.cast(),
            gamma_sdpa: self.gamma_sdpa.cast(),
            beta_sdpa: self.beta_sdpa.cast(),
            gamma_bottleneck: self.gamma_bottleneck.cast(),
            beta_bottleneck: self.beta_bottleneck.cast(),
            eps: self.eps,
        }
    }
}

/// Graph handles for bound [`FusionParams`].
#[derive(Debug, Clone)]
pub struct FusionVars {
    pub bottleneck: LinearVars,
    pub w_q: LinearVars,
    pub w_k: LinearVars,
    pub w_v: LinearVars,
    pub inverse_bottleneck: LinearVars,
    pub gamma_sdpa: VarId,
    pub beta_sdpa: VarId,
    pub gamma_bottleneck: VarId,
    pub beta_bottleneck: VarId,
    pub eps: f64,
}

/// `h_tilde = GELU(bottleneck(h))`, `[K,M,d_emb] -> [K,M,d_hid]`.
pub fn contract_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &FusionVars,
    h: VarId,
) -> Result<VarId> {
    let lin = linear_apply(g, &vars.bottleneck, h)?;
    g.gelu(lin)
}

/// Scaled dot-product attention across channels, independently per patch.
/// Returns `(a, A)` with `a: [K,M,d_hid]`, `A: [K,M,M]`.
pub fn marker_sdpa_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &FusionVars,
    h_tilde: VarId,
) -> Result<(VarId, VarId)> {
    let shape = g.shape(h_tilde).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("marker_sdpa expects [K,M,d_hid], got {shape:?}")));
    }
    let d_hid = shape[2];
    let q = linear_apply(g, &vars.w_q, h_tilde)?;
    let k = linear_apply(g, &vars.w_k, h_tilde)?;
    let v = linear_apply(g, &vars.w_v, h_tilde)?;
    let k_t = g.transpose_last2(k)?;
    let scores = g.batch_matmul(q, k_t)?;
    let scaled = g.scale(scores, 1.0 / (d_hid as f64).sqrt())?;
    let attn = g.softmax(scaled, 2)?;
    let a = g.batch_matmul(attn, v)?;
    Ok((a, attn))
}

/// Normalize each `(patch, channel)` slice over its last dimension, then
/// apply the learned affine: `(x - mean) / std * gamma + beta`.
pub fn marker_norm_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    eps: f64,
) -> Result<VarId> {
    let rank = g.shape(x).len();
    if rank == 0 {
        return Err(Error::dim("marker_norm on rank-0 tensor"));
    }
    let (mean, std) = g.norm_stats(x, rank - 1, eps)?;
    let centered = g.sub_stat(x, mean)?;
    let normed = g.div_stat(centered, std)?;
    let scaled = g.mul_last_dim(normed, gamma)?;
    g.add_last_dim(scaled, beta)
}

/// Full fusion block. Returns `(h_hat, attention)` with `h_hat: [K, d_emb]`
/// and `attention: [K, M, M]`.
pub fn fuse_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &FusionVars,
    h: VarId,
) -> Result<(VarId, VarId)> {
    let h_tilde = contract_graph(g, vars, h)?;
    let (a, attn) = marker_sdpa_graph(g, vars, h_tilde)?;
    let a = g.add(a, h_tilde)?;
    let a = marker_norm_graph(g, a, vars.gamma_sdpa, vars.beta_sdpa, vars.eps)?;
    let a = linear_apply(g, &vars.inverse_bottleneck, a)?;
    let a = g.gelu(a)?;
    let a = g.add(a, h)?;
    let a = marker_norm_graph(g, a, vars.gamma_bottleneck, vars.beta_bottleneck, vars.eps)?;
    let h_hat = g.mean(a, 1)?;
    Ok((h_hat, attn))
}

fn check_bag_matches_params<S: Scalar>(
    bag: &EmbeddedBag<S>,
    params: &FusionParams<S>,
) -> Result<()> {
    if bag.d_emb() != params.d_emb() {
        return Err(Error::dim(format!(
            "bag embedding dim {} does not match params d_emb {}",
            bag.d_emb(),
            params.d_emb()
        )));
    }
    Ok(())
}

/// Contracted embeddings as plain tensors, `[K, M, d_hid]`.
pub fn contract<S: Scalar>(bag: &EmbeddedBag<S>, params: &FusionParams<S>) -> Result<Tensor<S>> {
    check_bag_matches_params(bag, params)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let h = g.constant(bag.h.clone())?;
    let out = contract_graph(&mut g, &vars, h)?;
    Ok(g.value(out).clone())
}

/// Channel attention as plain tensors: `(a, A)`.
pub fn marker_sdpa<S: Scalar>(
    h_tilde: &Tensor<S>,
    params: &FusionParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let ht = g.constant(h_tilde.clone())?;
    let (a, attn) = marker_sdpa_graph(&mut g, &vars, ht)?;
    Ok((g.value(a).clone(), g.value(attn).clone()))
}

/// Normalization with explicit affine parameters, as plain tensors.
pub fn marker_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let gv = g.constant(gamma.clone())?;
    let bv = g.constant(beta.clone())?;
    let out = marker_norm_graph(&mut g, xv, gv, bv, eps)?;
    Ok(g.value(out).clone())
}

/// Run the full block on a bag.
pub fn fuse<S: Scalar>(bag: &EmbeddedBag<S>, params: &FusionParams<S>) -> Result<FusedBag<S>> {
    check_bag_matches_params(bag, params)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let h = g.constant(bag.h.clone())?;
    let (h_hat, attn) = fuse_graph(&mut g, &vars, h)?;
    Ok(FusedBag {
        sample_id: bag.sample_id.clone(),
        coords: bag.coords.clone(),
        h_hat: g.value(h_hat).clone(),
        attention: g.value(attn).clone(),
    })
}
