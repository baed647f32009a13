//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] records every primitive application in topological order
//! (operands always precede results). [`Graph::backward`] walks the record in
//! reverse and accumulates gradients into the `grad` field of each node's
//! tensor. One graph corresponds to one forward pass; training builds a fresh
//! graph per step.
//!
//! Every op validates operand extents (`Error::Dim`) and checks its output for
//! NaN/Inf (`Error::Numeric`), so a completed forward pass holds only finite
//! values. Summation order inside each op is fixed index order, which makes
//! replays bit-identical at a given precision.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { a: usize, b: usize },
    /// `[B,m,k] x [B,k,n] -> [B,m,n]`
    BatchMatMul { a: usize, b: usize },
    /// Swap the last two axes.
    TransposeLast2 { a: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    /// Multiply by a compile-time constant.
    Scale { a: usize, c: f64 },
    /// `[..., d] + [d]`, vector broadcast over leading axes.
    AddLastDim { a: usize, v: usize },
    /// `[..., d] * [d]`
    MulLastDim { a: usize, v: usize },
    /// `[..., d] - [...]`, per-slice statistic broadcast over the last axis.
    SubStat { a: usize, s: usize },
    /// `[..., d] / [...]`
    DivStat { a: usize, s: usize },
    Tanh { a: usize },
    Sigm { a: usize },
    Gelu { a: usize },
    Softmax { a: usize, axis: usize },
    /// Arithmetic mean along `axis`; the axis is removed.
    Mean { a: usize, axis: usize },
    /// Biased standard deviation along `axis`, plus `eps` after the root.
    Std { a: usize, axis: usize, eps: f64 },
    /// Sum of all elements, producing a rank-0 scalar.
    SumAll { a: usize },
    /// Cumulative product of a 1-D tensor.
    CumProd { a: usize },
    /// Single element of a 1-D tensor, producing a rank-0 scalar.
    Index { a: usize, idx: usize },
    /// `ln(max(x, floor))` elementwise.
    LogClamped { a: usize, floor: f64 },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    /// True when any transitive input is a `requires_grad` leaf.
    needs_grad: bool,
}

/// Recorded forward pass supporting one reverse sweep.
#[derive(Debug)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Insert an input tensor. Gradients are collected for it iff
    /// `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<S>, requires_grad: bool) -> Result<VarId> {
        if !tensor.all_finite() {
            return Err(Error::numeric("leaf tensor contains NaN/Inf"));
        }
        let mut value = tensor;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Result<VarId> {
        self.leaf(tensor, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: VarId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if collected.
    pub fn grad(&self, id: VarId) -> Option<&[S]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn grad_tensor(&self, id: VarId) -> Result<Tensor<S>> {
        let node = &self.nodes[id.0];
        match &node.value.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None => Err(Error::contract("gradient not populated for this node")),
        }
    }

    /// Drop all gradients so `backward` may run again.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul expects rank 2, got {sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul inner extents {} vs {}", sa[1], sb[0])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_slice(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a: a.0, b: b.0 },
            needs,
        )
    }

    pub fn batch_matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!(
                "batch_matmul expects [B,m,k] x [B,k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        for bi in 0..bs {
            let a_sl = &self.data(a)[bi * m * k..(bi + 1) * m * k];
            let b_sl = &self.data(b)[bi * k * n..(bi + 1) * k * n];
            let c = matmul_slice(a_sl, b_sl, m, k, n);
            out[bi * m * n..(bi + 1) * m * n].copy_from_slice(&c);
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a: a.0, b: b.0 },
            needs,
        )
    }

    pub fn transpose_last2(&mut self, a: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::dim(format!("transpose_last2 expects rank >= 2, got {sa:?}")));
        }
        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let data = self.data(a);
        let mut out = vec![S::zero(); data.len()];
        for bi in 0..batch {
            let base = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = data[base + i * n + j];
                }
            }
        }
        let mut shape = sa.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::TransposeLast2 { a: a.0 }, needs)
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, data)?, Op::Reshape { a: a.0 }, needs)
    }

    fn binary_same_shape(
        &mut self,
        a: VarId,
        b: VarId,
        name: &str,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(shape, out)?, op, needs)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "hadamard", |x, y| x * y, Op::Hadamard { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.data(a).iter().map(|&x| x * cs).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::Scale { a: a.0, c }, needs)
    }

    fn last_dim_broadcast(
        &mut self,
        a: VarId,
        v: VarId,
        name: &str,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        let d = *sa.last().ok_or_else(|| Error::dim(format!("{name} on rank-0 tensor")))?;
        if sv != [d] {
            return Err(Error::dim(format!(
                "{name} vector shape {sv:?} does not match last extent {d}"
            )));
        }
        let vd = self.data(v).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vd[i % d]))
            .collect();
        let needs = self.needs(&[a.0, v.0]);
        self.push(Tensor::new(sa, out)?, op, needs)
    }

    pub fn add_last_dim(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        self.last_dim_broadcast(a, v, "add_last_dim", |x, y| x + y, Op::AddLastDim { a: a.0, v: v.0 })
    }

    pub fn mul_last_dim(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        self.last_dim_broadcast(a, v, "mul_last_dim", |x, y| x * y, Op::MulLastDim { a: a.0, v: v.0 })
    }

    fn stat_broadcast(
        &mut self,
        a: VarId,
        s: VarId,
        name: &str,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(s).to_vec();
        if sa.is_empty() || ss != sa[..sa.len() - 1] {
            return Err(Error::dim(format!(
                "{name}: stat shape {ss:?} must equal {:?} minus last axis",
                sa
            )));
        }
        let d = sa[sa.len() - 1];
        let sd = self.data(s).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, sd[i / d]))
            .collect();
        let needs = self.needs(&[a.0, s.0]);
        self.push(Tensor::new(sa, out)?, op, needs)
    }

    /// Subtract a per-slice statistic (shape = input minus last axis).
    pub fn sub_stat(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.stat_broadcast(a, s, "sub_stat", |x, y| x - y, Op::SubStat { a: a.0, s: s.0 })
    }

    /// Divide by a per-slice statistic (shape = input minus last axis).
    pub fn div_stat(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.stat_broadcast(a, s, "div_stat", |x, y| x / y, Op::DivStat { a: a.0, s: s.0 })
    }

    fn unary(&mut self, a: VarId, f: impl Fn(S) -> S, op: Op) -> Result<VarId> {
        let out: Vec<S> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, op, needs)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a: a.0 })
    }

    pub fn sigm(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, sigmoid, Op::Sigm { a: a.0 })
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, gelu_exact, Op::Gelu { a: a.0 })
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&sa, axis)?;
        if extent == 0 {
            return Err(Error::dim("softmax along empty axis"));
        }
        let data = self.data(a);
        let mut out = vec![S::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut max = S::neg_infinity();
                for e in 0..extent {
                    max = max.max(data[at(e)]);
                }
                let mut denom = S::zero();
                for e in 0..extent {
                    let ex = (data[at(e)] - max).exp();
                    out[at(e)] = ex;
                    denom = denom + ex;
                }
                for e in 0..extent {
                    out[at(e)] = out[at(e)] / denom;
                }
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(sa, out)?, Op::Softmax { a: a.0, axis }, needs)
    }

    pub fn mean(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&sa, axis)?;
        if extent == 0 {
            return Err(Error::dim("mean along empty axis"));
        }
        let data = self.data(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = S::zero();
                for e in 0..extent {
                    acc = acc + data[(o * extent + e) * inner + i];
                }
                out[o * inner + i] = acc / S::from_f64(extent as f64);
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::Mean { a: a.0, axis }, needs)
    }

    /// Biased (1/d) standard deviation along `axis`, with `eps` added after
    /// the square root, so constant slices yield exactly `eps`.
    pub fn std(&mut self, a: VarId, axis: usize, eps: f64) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&sa, axis)?;
        if extent == 0 {
            return Err(Error::dim("std along empty axis"));
        }
        let data = self.data(a);
        let mut out = vec![S::zero(); outer * inner];
        let ext = S::from_f64(extent as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut mean = S::zero();
                for e in 0..extent {
                    mean = mean + data[at(e)];
                }
                mean = mean / ext;
                let mut var = S::zero();
                for e in 0..extent {
                    let d = data[at(e)] - mean;
                    var = var + d * d;
                }
                var = var / ext;
                out[o * inner + i] = var.sqrt() + S::from_f64(eps);
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::Std { a: a.0, axis, eps }, needs)
    }

    /// Per-slice `(mean, std)` along `axis`, as one call.
    pub fn norm_stats(&mut self, a: VarId, axis: usize, eps: f64) -> Result<(VarId, VarId)> {
        let mean = self.mean(a, axis)?;
        let std = self.std(a, axis, eps)?;
        Ok((mean, std))
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let mut acc = S::zero();
        for &x in self.data(a) {
            acc = acc + x;
        }
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(acc), Op::SumAll { a: a.0 }, needs)
    }

    pub fn cumprod(&mut self, a: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 {
            return Err(Error::dim(format!("cumprod expects rank 1, got {sa:?}")));
        }
        let data = self.data(a);
        let mut out = Vec::with_capacity(data.len());
        let mut acc = S::one();
        for &x in data {
            acc = acc * x;
            out.push(acc);
        }
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(sa, out)?, Op::CumProd { a: a.0 }, needs)
    }

    pub fn index(&mut self, a: VarId, idx: usize) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 {
            return Err(Error::dim(format!("index expects rank 1, got {sa:?}")));
        }
        if idx >= sa[0] {
            return Err(Error::dim(format!("index {idx} out of range for extent {}", sa[0])));
        }
        let v = self.data(a)[idx];
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(v), Op::Index { a: a.0, idx }, needs)
    }

    /// `ln(max(x, floor))`, the guarded log used by the survival loss.
    pub fn log_clamped(&mut self, a: VarId, floor: f64) -> Result<VarId> {
        let fl = S::from_f64(floor);
        let out: Vec<S> = self.data(a).iter().map(|&x| x.max(fl).ln()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::LogClamped { a: a.0, floor }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate `d loss / d node` into every node reachable from a
    /// `requires_grad` leaf. Errors on a non-scalar loss and on repeated
    /// invocation without [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; call clear_grads() first",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].needs_grad {
                        let bd = self.nodes[b].value.data().to_vec();
                        let da = self.grad_buf(a);
                        // dA = g @ B^T
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut acc = S::zero();
                                for j in 0..n {
                                    acc = acc + g[i2 * n + j] * bd[p * n + j];
                                }
                                da[i2 * k + p] = da[i2 * k + p] + acc;
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.nodes[a].value.data().to_vec();
                        let db = self.grad_buf(b);
                        // dB = A^T @ g
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = S::zero();
                                for i2 in 0..m {
                                    acc = acc + ad[i2 * k + p] * g[i2 * n + j];
                                }
                                db[p * n + j] = db[p * n + j] + acc;
                            }
                        }
                    }
                }
                Op::BatchMatMul { a, b } => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.nodes[a].needs_grad {
                        let bd = self.nodes[b].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for bi in 0..bs {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bd[bi * k * n..(bi + 1) * k * n];
                            let ab = &mut da[bi * m * k..(bi + 1) * m * k];
                            for i2 in 0..m {
                                for p in 0..k {
                                    let mut acc = S::zero();
                                    for j in 0..n {
                                        acc = acc + gb[i2 * n + j] * bb[p * n + j];
                                    }
                                    ab[i2 * k + p] = ab[i2 * k + p] + acc;
                                }
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.nodes[a].value.data().to_vec();
                        let db = self.grad_buf(b);
                        for bi in 0..bs {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let aa = &ad[bi * m * k..(bi + 1) * m * k];
                            let bb = &mut db[bi * k * n..(bi + 1) * k * n];
                            for p in 0..k {
                                for j in 0..n {
                                    let mut acc = S::zero();
                                    for i2 in 0..m {
                                        acc = acc + aa[i2 * k + p] * gb[i2 * n + j];
                                    }
                                    bb[p * n + j] = bb[p * n + j] + acc;
                                }
                            }
                        }
                    }
                }
                Op::TransposeLast2 { a } => {
                    if self.nodes[a].needs_grad {
                        let sa = self.nodes[a].value.shape().to_vec();
                        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                        let batch: usize = sa[..sa.len() - 2].iter().product();
                        let da = self.grad_buf(a);
                        // output was [.., n, m]; route g back
                        for bi in 0..batch {
                            let base = bi * m * n;
                            for i2 in 0..m {
                                for j in 0..n {
                                    da[base + i2 * n + j] =
                                        da[base + i2 * n + j] + g[base + j * m + i2];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    self.accumulate(a, &g);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g);
                    if self.nodes[b].needs_grad {
                        let db = self.grad_buf(b);
                        for (dst, &gi) in db.iter_mut().zip(&g) {
                            *dst = *dst - gi;
                        }
                    }
                }
                Op::Hadamard { a, b } => {
                    if self.nodes[a].needs_grad {
                        let bd = self.nodes[b].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * bd[i2];
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.nodes[a].value.data().to_vec();
                        let db = self.grad_buf(b);
                        for i2 in 0..g.len() {
                            db[i2] = db[i2] + g[i2] * ad[i2];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if self.nodes[a].needs_grad {
                        let cs = S::from_f64(c);
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * cs;
                        }
                    }
                }
                Op::AddLastDim { a, v } => {
                    self.accumulate(a, &g);
                    if self.nodes[v].needs_grad {
                        let d = self.nodes[v].value.numel();
                        let dv = self.grad_buf(v);
                        for (i2, &gi) in g.iter().enumerate() {
                            dv[i2 % d] = dv[i2 % d] + gi;
                        }
                    }
                }
                Op::MulLastDim { a, v } => {
                    let d = self.nodes[v].value.numel();
                    if self.nodes[a].needs_grad {
                        let vd = self.nodes[v].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for (i2, &gi) in g.iter().enumerate() {
                            da[i2] = da[i2] + gi * vd[i2 % d];
                        }
                    }
                    if self.nodes[v].needs_grad {
                        let ad = self.nodes[a].value.data().to_vec();
                        let dv = self.grad_buf(v);
                        for (i2, &gi) in g.iter().enumerate() {
                            dv[i2 % d] = dv[i2 % d] + gi * ad[i2];
                        }
                    }
                }
                Op::SubStat { a, s } => {
                    let d = *self.nodes[a].value.shape().last().unwrap();
                    self.accumulate(a, &g);
                    if self.nodes[s].needs_grad {
                        let ds = self.grad_buf(s);
                        for (i2, &gi) in g.iter().enumerate() {
                            ds[i2 / d] = ds[i2 / d] - gi;
                        }
                    }
                }
                Op::DivStat { a, s } => {
                    let d = *self.nodes[a].value.shape().last().unwrap();
                    let sd = self.nodes[s].value.data().to_vec();
                    if self.nodes[a].needs_grad {
                        let da = self.grad_buf(a);
                        for (i2, &gi) in g.iter().enumerate() {
                            da[i2] = da[i2] + gi / sd[i2 / d];
                        }
                    }
                    if self.nodes[s].needs_grad {
                        let ad = self.nodes[a].value.data().to_vec();
                        let ds = self.grad_buf(s);
                        for (i2, &gi) in g.iter().enumerate() {
                            let r = i2 / d;
                            ds[r] = ds[r] - gi * ad[i2] / (sd[r] * sd[r]);
                        }
                    }
                }
                Op::Tanh { a } => {
                    if self.nodes[a].needs_grad {
                        let yd = self.nodes[i].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * (S::one() - yd[i2] * yd[i2]);
                        }
                    }
                }
                Op::Sigm { a } => {
                    if self.nodes[a].needs_grad {
                        let yd = self.nodes[i].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * yd[i2] * (S::one() - yd[i2]);
                        }
                    }
                }
                Op::Gelu { a } => {
                    if self.nodes[a].needs_grad {
                        let xd = self.nodes[a].value.data().to_vec();
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * gelu_exact_deriv(xd[i2]);
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.nodes[a].needs_grad {
                        let yd = self.nodes[i].value.data().to_vec();
                        let sa = self.nodes[a].value.shape().to_vec();
                        let (outer, extent, inner) = axis_split(&sa, axis).expect("checked");
                        let da = self.grad_buf(a);
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let at = |e: usize| (o * extent + e) * inner + i2;
                                let mut dot = S::zero();
                                for e in 0..extent {
                                    dot = dot + g[at(e)] * yd[at(e)];
                                }
                                for e in 0..extent {
                                    let idx = at(e);
                                    da[idx] = da[idx] + yd[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Mean { a, axis } => {
                    if self.nodes[a].needs_grad {
                        let sa = self.nodes[a].value.shape().to_vec();
                        let (outer, extent, inner) = axis_split(&sa, axis).expect("checked");
                        let inv = S::one() / S::from_f64(extent as f64);
                        let da = self.grad_buf(a);
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let gi = g[o * inner + i2] * inv;
                                for e in 0..extent {
                                    let idx = (o * extent + e) * inner + i2;
                                    da[idx] = da[idx] + gi;
                                }
                            }
                        }
                    }
                }
                Op::Std { a, axis, eps } => {
                    if self.nodes[a].needs_grad {
                        let sa = self.nodes[a].value.shape().to_vec();
                        let (outer, extent, inner) = axis_split(&sa, axis).expect("checked");
                        let xd = self.nodes[a].value.data().to_vec();
                        let yd = self.nodes[i].value.data().to_vec();
                        let ext = S::from_f64(extent as f64);
                        let eps_s = S::from_f64(eps);
                        let da = self.grad_buf(a);
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let at = |e: usize| (o * extent + e) * inner + i2;
                                // sqrt(var) recovered from the stored output
                                let root = yd[o * inner + i2] - eps_s;
                                if root <= S::zero() {
                                    continue; // constant slice: zero subgradient
                                }
                                let mut mean = S::zero();
                                for e in 0..extent {
                                    mean = mean + xd[at(e)];
                                }
                                mean = mean / ext;
                                let gi = g[o * inner + i2];
                                for e in 0..extent {
                                    let idx = at(e);
                                    da[idx] = da[idx] + gi * (xd[idx] - mean) / (ext * root);
                                }
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    if self.nodes[a].needs_grad {
                        let gi = g[0];
                        let da = self.grad_buf(a);
                        for v in da.iter_mut() {
                            *v = *v + gi;
                        }
                    }
                }
                Op::CumProd { a } => {
                    if self.nodes[a].needs_grad {
                        let xd = self.nodes[a].value.data().to_vec();
                        let n = xd.len();
                        let da = self.grad_buf(a);
                        // dL/dx_i = sum_{j>=i} g_j * prod_{s<=j, s!=i} x_s,
                        // built without division so zero factors are safe.
                        for i2 in 0..n {
                            let mut partial = S::one();
                            for s in 0..i2 {
                                partial = partial * xd[s];
                            }
                            let mut acc = g[i2] * partial;
                            for j in i2 + 1..n {
                                partial = partial * xd[j];
                                acc = acc + g[j] * partial;
                            }
                            da[i2] = da[i2] + acc;
                        }
                    }
                }
                Op::Index { a, idx } => {
                    if self.nodes[a].needs_grad {
                        let da = self.grad_buf(a);
                        da[idx] = da[idx] + g[0];
                    }
                }
                Op::LogClamped { a, floor } => {
                    if self.nodes[a].needs_grad {
                        let xd = self.nodes[a].value.data().to_vec();
                        let fl = S::from_f64(floor);
                        let da = self.grad_buf(a);
                        for i2 in 0..g.len() {
                            if xd[i2] > fl {
                                da[i2] = da[i2] + g[i2] / xd[i2];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer of node `i`, allocated on first touch.
    fn grad_buf(&mut self, i: usize) -> &mut Vec<S> {
        let numel = self.nodes[i].value.numel();
        self.nodes[i]
            .value
            .grad
            .get_or_insert_with(|| vec![S::zero(); numel])
    }

    fn accumulate(&mut self, i: usize, g: &[S]) {
        if self.nodes[i].needs_grad {
            let buf = self.grad_buf(i);
            for (dst, &gi) in buf.iter_mut().zip(g) {
                *dst = *dst + gi;
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn matmul_slice<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b[p * n + j];
            }
        }
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn gelu_exact<S: Scalar>(x: S) -> S {
    // x * Phi(x) with Phi the standard normal CDF
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (S::one() + (x * inv_sqrt2).erf())
}

fn gelu_exact_deriv<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (S::one() + (x * inv_sqrt2).erf());
    let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> VarId {
        g.leaf(Tensor::new(shape, data).unwrap(), true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = leaf64(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf64(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, vec![1, 2], vec![1.0, 0.0]);
        let b = leaf64(&mut g, vec![2, 1], vec![0.0, 5.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = leaf64(&mut g, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![3], vec![1.0, 1.0, 1.0]);
        let y = g.softmax(x, 0).unwrap();
        for &v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![1000.0, 0.0]);
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] >= 0.0 && d[1] < 1e-12);
        let sum: f64 = d.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_axis_is_dim_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![0], vec![]).unwrap(), false).unwrap();
        assert!(matches!(g.softmax(x, 0), Err(Error::Dim(_))));
        let y = leaf64(&mut g, vec![2], vec![0.0, 1.0]);
        assert!(matches!(g.softmax(y, 3), Err(Error::Dim(_))));
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1], vec![0.0]);
        let s = g.sigm(x).unwrap();
        assert_eq!(g.data(s), &[0.5]);
        let ge = g.gelu(x).unwrap();
        assert_eq!(g.data(ge), &[0.0]);
        let a = leaf64(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf64(&mut g, vec![2], vec![3.0, 4.0]);
        let h = g.hadamard(a, b).unwrap();
        assert_eq!(g.data(h), &[3.0, 8.0]);
    }

    #[test]
    fn sigm_is_stable_for_large_negative_inputs() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![-1000.0, 1000.0]);
        let y = g.sigm(x).unwrap();
        let d = g.data(y);
        assert!(d[0] >= 0.0 && d[0] < 1e-300);
        assert!((d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_stats_constant_slice_yields_eps_std() {
        let eps = 1e-5;
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![4], vec![2.0, 2.0, 2.0, 2.0]);
        let (mean, std) = g.norm_stats(x, 0, eps).unwrap();
        assert_eq!(g.data(mean), &[2.0]);
        assert_eq!(g.data(std), &[eps]);
    }

    #[test]
    fn norm_stats_two_point_slice() {
        let eps = 1e-5;
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![0.0, 2.0]);
        let (mean, std) = g.norm_stats(x, 0, eps).unwrap();
        assert_eq!(g.data(mean), &[1.0]);
        assert!((g.data(std)[0] - (1.0 + eps)).abs() < 1e-15);
    }

    #[test]
    fn norm_stats_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![16], data.clone());
        let (mean, std) = g.norm_stats(x, 0, 1e-5).unwrap();

        // two-pass oracle
        let m: f64 = data.iter().sum::<f64>() / 16.0;
        let v: f64 = data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        let s = v.sqrt() + 1e-5;
        assert!((g.data(mean)[0] - m).abs() < 1e-12);
        assert!((g.data(std)[0] - s).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![], vec![3.0]);
        let sq = g.hadamard(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_without_reset_errors() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2], vec![1.0, 2.0]);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.clear_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1], vec![1e308]);
        let big = g.scale(x, 1e308).unwrap_err();
        assert!(matches!(big, Error::Numeric(_)));
        let nan_leaf = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(g.leaf(nan_leaf, false), Err(Error::Numeric(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let mut g = Graph::<f64>::new();
            let a = g
                .leaf(
                    Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                    true,
                )
                .unwrap();
            let b = g.tanh(a).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c, 1).unwrap();
            let l = g.sum_all(s).unwrap();
            g.backward(l).unwrap();
            (g.data(s).to_vec(), g.grad(a).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cumprod_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![3], vec![2.0, 3.0, 4.0]);
        let y = g.cumprod(x).unwrap();
        assert_eq!(g.data(y), &[2.0, 6.0, 24.0]);
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap(), false).unwrap();
        let wy = g.hadamard(y, w).unwrap();
        let loss = g.sum_all(wy).unwrap();
        g.backward(loss).unwrap();
        // d/dx0 (x0 + x0x1 + x0x1x2) = 1 + x1 + x1x2 = 1 + 3 + 12
        assert_eq!(g.grad(x).unwrap(), &[16.0, 10.0, 6.0]);
    }

    #[test]
    fn cumprod_backward_handles_zero_factors() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![3], vec![0.5, 0.0, 2.0]);
        let y = g.cumprod(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // y = [x0, x0x1, x0x1x2]; d/dx1 = x0 + x0x2 = 0.5 + 1.0
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[1], 1.5);
        assert!(grad.iter().all(|v| v.is_finite()));
    }
}
