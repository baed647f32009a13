//! The end-to-end bag model: channel fusion (or a mean-over-channels
//! baseline), gated attention pooling, and a linear hazard head.
//!
//! Parameter enumeration order is the contract that binds the optimizer and
//! the checkpoint format together: `named_params`, `bind`, and checkpoint
//! payloads all walk the same list.

use crate::error::{Error, Result};
use crate::fusion::{fuse_graph, EmbeddedBag, FusionParams, FusionVars, Linear, LinearVars, NORM_EPS_DEFAULT};
use crate::numerics::{Graph, Scalar, Tensor, VarId};
use crate::pooling::{attend_pool_classify_graph, GatedAttentionParams, GatedAttentionVars};
use crate::survival::nll_loss_graph;
use crate::survival::SurvivalTarget;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-channel attention block before pooling.
    Fluoroformer,
    /// Plain mean over channels; the ablation arm. With one channel this is
    /// classic gated ABMIL.
    ChannelMean,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Fluoroformer => write!(f, "fluoroformer"),
            FusionMode::ChannelMean => write!(f, "channel_mean"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fluoroformer" => Ok(FusionMode::Fluoroformer),
            "channel_mean" | "channel-mean" => Ok(FusionMode::ChannelMean),
            other => Err(Error::config(format!(
                "unknown fusion mode {other:?}, expected fluoroformer or channel_mean"
            ))),
        }
    }
}

/// Everything needed to rebuild a model skeleton with matching shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: FusionMode,
    pub d_emb: usize,
    /// Bottleneck width; ignored (and reported as 0) in channel-mean mode.
    pub d_hid: usize,
    pub d_att: usize,
    pub n_bin: usize,
    pub attn_bias: bool,
    pub norm_eps: f64,
}

impl ModelSpec {
    pub fn new(mode: FusionMode, d_emb: usize, d_hid: usize, d_att: usize, n_bin: usize) -> Self {
        ModelSpec {
            mode,
            d_emb,
            d_hid,
            d_att,
            n_bin,
            attn_bias: true,
            norm_eps: NORM_EPS_DEFAULT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub mode: FusionMode,
    /// Present exactly when `mode == Fluoroformer`.
    pub fusion: Option<FusionParams<S>>,
    pub attention: GatedAttentionParams<S>,
    pub head: Linear<S>,
}

impl<S: Scalar> Model<S> {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.n_bin == 0 {
            return Err(Error::contract("n_bin must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = match spec.mode {
            FusionMode::Fluoroformer => Some(FusionParams::init(
                spec.d_emb,
                spec.d_hid,
                spec.attn_bias,
                spec.norm_eps,
                &mut rng,
            )?),
            FusionMode::ChannelMean => None,
        };
        let attention = GatedAttentionParams::init(spec.d_emb, spec.d_att, &mut rng)?;
        let head = Linear::init(spec.d_emb, spec.n_bin, true, &mut rng);
        Ok(Model { mode: spec.mode, fusion, attention, head })
    }

    pub fn d_emb(&self) -> usize {
        self.attention.d_emb()
    }

    pub fn n_bin(&self) -> usize {
        self.head.out_dim()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            mode: self.mode,
            d_emb: self.d_emb(),
            d_hid: self.fusion.as_ref().map_or(0, |f| f.d_hid()),
            d_att: self.attention.d_att(),
            n_bin: self.n_bin(),
            attn_bias: self
                .fusion
                .as_ref()
                .map_or(true, |f| f.w_q.bias.is_some()),
            norm_eps: self.fusion.as_ref().map_or(NORM_EPS_DEFAULT, |f| f.eps),
        }
    }

    /// Stable (name, tensor) listing. This order is the wire order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(f) = &self.fusion {
            push_linear(&mut out, "fusion.bottleneck", &f.bottleneck);
            push_linear(&mut out, "fusion.w_q", &f.w_q);
            push_linear(&mut out, "fusion.w_k", &f.w_k);
            push_linear(&mut out, "fusion.w_v", &f.w_v);
            push_linear(&mut out, "fusion.inverse_bottleneck", &f.inverse_bottleneck);
            out.push(("fusion.gamma_sdpa".into(), &f.gamma_sdpa));
            out.push(("fusion.beta_sdpa".into(), &f.beta_sdpa));
            out.push(("fusion.gamma_bottleneck".into(), &f.gamma_bottleneck));
            out.push(("fusion.beta_bottleneck".into(), &f.beta_bottleneck));
        }
        push_linear(&mut out, "attention.v", &self.attention.v);
        push_linear(&mut out, "attention.u", &self.attention.u);
        push_linear(&mut out, "attention.w", &self.attention.w);
        push_linear(&mut out, "head", &self.head);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let Model { fusion, attention, head, .. } = self;
        let mut out = Vec::new();
        if let Some(f) = fusion {
            push_linear_mut(&mut out, "fusion.bottleneck", &mut f.bottleneck);
            push_linear_mut(&mut out, "fusion.w_q", &mut f.w_q);
            push_linear_mut(&mut out, "fusion.w_k", &mut f.w_k);
            push_linear_mut(&mut out, "fusion.w_v", &mut f.w_v);
            push_linear_mut(&mut out, "fusion.inverse_bottleneck", &mut f.inverse_bottleneck);
            out.push(("fusion.gamma_sdpa".into(), &mut f.gamma_sdpa));
            out.push(("fusion.beta_sdpa".into(), &mut f.beta_sdpa));
            out.push(("fusion.gamma_bottleneck".into(), &mut f.gamma_bottleneck));
            out.push(("fusion.beta_bottleneck".into(), &mut f.beta_bottleneck));
        }
        push_linear_mut(&mut out, "attention.v", &mut attention.v);
        push_linear_mut(&mut out, "attention.u", &mut attention.u);
        push_linear_mut(&mut out, "attention.w", &mut attention.w);
        push_linear_mut(&mut out, "head", head);
        out
    }

    /// Reassemble graph handles from leaf ids laid out in `named_params`
    /// order. `ids` must have exactly one entry per parameter.
    pub fn vars_from_ids(&self, ids: &[VarId]) -> Result<ModelVars> {
        let expected = self.named_params().len();
        if ids.len() != expected {
            return Err(Error::contract(format!(
                "{} leaf ids for {expected} parameters",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let take_linear = |lin: &Linear<S>, it: &mut std::iter::Copied<std::slice::Iter<VarId>>| LinearVars {
            weight: it.next().expect("length checked"),
            bias: lin.bias.as_ref().map(|_| it.next().expect("length checked")),
        };
        let fusion = self.fusion.as_ref().map(|f| FusionVars {
            bottleneck: take_linear(&f.bottleneck, &mut it),
            w_q: take_linear(&f.w_q, &mut it),
            w_k: take_linear(&f.w_k, &mut it),
            w_v: take_linear(&f.w_v, &mut it),
            inverse_bottleneck: take_linear(&f.inverse_bottleneck, &mut it),
            gamma_sdpa: it.next().expect("length checked"),
            beta_sdpa: it.next().expect("length checked"),
            gamma_bottleneck: it.next().expect("length checked"),
            beta_bottleneck: it.next().expect("length checked"),
            eps: f.eps,
        });
        let attention = GatedAttentionVars {
            v: take_linear(&self.attention.v, &mut it),
            u: take_linear(&self.attention.u, &mut it),
            w: take_linear(&self.attention.w, &mut it),
        };
        let head = take_linear(&self.head, &mut it);
        debug_assert!(it.next().is_none());
        Ok(ModelVars { fusion, attention, head })
    }

    /// Push every parameter as a graph leaf and return handles plus the leaf
    /// ids aligned with `named_params` order.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<BoundModel> {
        let param_ids: Vec<VarId> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect::<Result<_>>()?;
        let vars = self.vars_from_ids(&param_ids)?;
        Ok(BoundModel { vars, param_ids })
    }

    /// Forward pass on a bag, no gradients.
    pub fn forward(&self, bag: &EmbeddedBag<S>) -> Result<ModelOutput<S>> {
        if bag.d_emb() != self.d_emb() {
            return Err(Error::dim(format!(
                "bag d_emb {} does not match model d_emb {}",
                bag.d_emb(),
                self.d_emb()
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let h = g.constant(bag.h.clone())?;
        let out = forward_graph(&mut g, &bound.vars, h)?;
        Ok(ModelOutput {
            h_hat: g.value(out.h_hat).clone(),
            marker_attention: out.marker_attention.map(|a| g.value(a).clone()),
            patch_attention: g.value(out.patch_attention).clone(),
            h_bag: g.value(out.h_bag).clone(),
            logits: g.value(out.logits).clone(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            mode: self.mode,
            fusion: self.fusion.as_ref().map(|f| f.cast()),
            attention: self.attention.cast(),
            head: self.head.cast(),
        }
    }
}

fn push_linear<'a, S: Scalar>(out: &mut Vec<(String, &'a Tensor<S>)>, prefix: &str, lin: &'a Linear<S>) {
    out.push((format!("{prefix}.weight"), &lin.weight));
    if let Some(b) = &lin.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn push_linear_mut<'a, S: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<S>)>,
    prefix: &str,
    lin: &'a mut Linear<S>,
) {
    out.push((format!("{prefix}.weight"), &mut lin.weight));
    if let Some(b) = &mut lin.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub fusion: Option<FusionVars>,
    pub attention: GatedAttentionVars,
    pub head: LinearVars,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: ModelVars,
    /// Aligned with `named_params` order; zip against it to read gradients.
    pub param_ids: Vec<VarId>,
}

/// Graph handles for everything a forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    /// `[K, d_emb]`
    pub h_hat: VarId,
    /// `[K, M, M]`, absent in channel-mean mode
    pub marker_attention: Option<VarId>,
    /// `[K]`
    pub patch_attention: VarId,
    /// `[d_emb]`
    pub h_bag: VarId,
    /// `[N_bin]`
    pub logits: VarId,
}

/// Value snapshot of [`GraphOutput`].
#[derive(Debug, Clone)]
pub struct ModelOutput<S: Scalar> {
    pub h_hat: Tensor<S>,
    pub marker_attention: Option<Tensor<S>>,
    pub patch_attention: Tensor<S>,
    pub h_bag: Tensor<S>,
    pub logits: Tensor<S>,
}

/// `h` is the `[K, M, d_emb]` bag tensor already in the graph.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ModelVars,
    h: VarId,
) -> Result<GraphOutput> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("model expects [K,M,d_emb], got {shape:?}")));
    }
    let (h_hat, marker_attention) = match &vars.fusion {
        Some(f) => {
            let (h_hat, attn) = fuse_graph(g, f, h)?;
            (h_hat, Some(attn))
        }
        None => (g.mean(h, 1)?, None),
    };
    let (patch_attention, h_bag, logits) =
        attend_pool_classify_graph(g, &vars.attention, &vars.head, h_hat)?;
    Ok(GraphOutput { h_hat, marker_attention, patch_attention, h_bag, logits })
}

/// Forward pass plus the survival loss in one graph, for training.
pub fn loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ModelVars,
    h: VarId,
    target: &SurvivalTarget,
) -> Result<(GraphOutput, VarId)> {
    let out = forward_graph(g, vars, h)?;
    let loss = nll_loss_graph(g, out.logits, target)?;
    Ok((out, loss))
}
