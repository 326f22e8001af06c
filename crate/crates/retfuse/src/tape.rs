//! Tape-based reverse-mode autodiff over `Tensor` values.
//!
//! A `GradTape` is an append-only arena of nodes; every op records its
//! inputs by `NodeId` and stores its forward value eagerly. `backward`
//! walks the tape in reverse from a scalar loss and accumulates gradients
//! for every node on the path; leaves that require grad but are not
//! reachable from the loss get explicit zero gradients.
//!
//! Tapes are per-sample: the batch dimension lives outside this module
//! (samples run on independent tapes and their parameter gradients are
//! merged in fixed order by the trainer).
//!
//! Every op constructor returns `Result`: in debug builds an op that
//! produces a non-finite value fails immediately, which the trainer maps
//! to divergence just like a NaN loss in release builds.

use crate::conv::{self, ConvSpec};
use crate::tensor::{Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

// ── Ops ───────────────────────────────────────────────────────────────

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        spec: ConvSpec,
    },
    GlobalAvgPool(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        var: Vec<f32>,
        /// Train mode: stats above were computed from `x`, so the backward
        /// pass differentiates through them. Eval mode: stats are frozen
        /// constants and the op is a pure per-channel affine map.
        train: bool,
    },
    BceLoss {
        p: NodeId,
        target: f32,
        pos_weight: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

// ── Tape ──────────────────────────────────────────────────────────────

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    // ── Elementwise and reductions ────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add".into(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::from_op(ta.shape().to_vec(), data, "add")?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul".into(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::from_op(ta.shape().to_vec(), data, "mul")?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f32> = ta.data().iter().map(|x| x * c).collect();
        let v = Tensor::from_op(ta.shape().to_vec(), data, "scale")?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    /// Total sum, rank-0 result. Accumulates in f64.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum();
        let v = Tensor::from_op(vec![], vec![s as f32], "sum")?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Sum(a), rg))
    }

    /// Arithmetic mean, rank-0 result. Accumulates in f64.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let v = Tensor::from_op(vec![], vec![(s / t.numel() as f64) as f32], "mean")?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Mean(a), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x.max(0.0))
            .collect();
        let v = Tensor::from_op(self.nodes[a.0].value.shape().to_vec(), data, "relu")?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Relu(a), rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| stable_sigmoid(x))
            .collect();
        let v = Tensor::from_op(self.nodes[a.0].value.shape().to_vec(), data, "sigmoid")?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Sigmoid(a), rg))
    }

    // ── Linear algebra ────────────────────────────────────────────

    /// `y = W·x (+ b)` with `x: [in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 1 || tw.rank() != 2 || tw.shape()[1] != tx.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear".into(),
                lhs: tw.shape().to_vec(),
                rhs: tx.shape().to_vec(),
            });
        }
        let (out, inp) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias".into(),
                    lhs: vec![out],
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        let mut data = Vec::with_capacity(out);
        for o in 0..out {
            let mut acc = b.map_or(0f64, |b| self.nodes[b.0].value.data()[o] as f64);
            let row = &tw.data()[o * inp..(o + 1) * inp];
            for (wv, xv) in row.iter().zip(tx.data()) {
                acc += *wv as f64 * *xv as f64;
            }
            data.push(acc as f32);
        }
        let v = Tensor::from_op(vec![out], data, "linear")?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.needs(&ids);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = Tensor::concat(axis, &tensors)?;
        let rg = self.needs(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ── Convolution and pooling ───────────────────────────────────

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let bias = b.map(|b| self.nodes[b.0].value.data().to_vec());
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (data, shape) = conv::conv_forward(
            tx.data(),
            tx.shape(),
            tw.data(),
            tw.shape(),
            bias.as_deref(),
            spec,
        )?;
        let v = Tensor::from_op(shape, data, "conv")?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.needs(&ids);
        Ok(self.push(
            v,
            Op::Conv {
                x,
                w,
                b,
                spec: spec.clone(),
            },
            rg,
        ))
    }

    pub fn max_pool(&mut self, x: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (data, shape, arg) = conv::max_pool_forward(tx.data(), tx.shape(), spec)?;
        let v = Tensor::from_op(shape, data, "max_pool")?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::MaxPool { x, arg }, rg))
    }

    pub fn avg_pool(&mut self, x: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (data, shape) = conv::avg_pool_forward(tx.data(), tx.shape(), spec)?;
        let v = Tensor::from_op(shape, data, "avg_pool")?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            v,
            Op::AvgPool {
                x,
                spec: spec.clone(),
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (data, shape) = conv::global_avg_pool_forward(tx.data(), tx.shape())?;
        let v = Tensor::from_op(shape, data, "global_avg_pool")?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    // ── Normalization ─────────────────────────────────────────────

    /// Per-channel batch normalization over `x: [C, spatial…]`.
    ///
    /// `running = None` is train mode: mean and (biased) variance are
    /// computed from this sample's own spatial extent per channel, and the
    /// backward pass differentiates through them. `running = Some((μ, σ²))`
    /// is eval mode: the op reduces to a fixed affine transform.
    ///
    /// The stats used are retrievable via [`GradTape::bn_stats`] so the
    /// trainer can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() < 2 {
            return Err(TensorError::Other(format!(
                "batch norm input must be [channels, spatial…], got shape {:?}",
                tx.shape()
            )));
        }
        let c = tx.shape()[0];
        let m: usize = tx.shape()[1..].iter().product();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.nodes[id.0].value;
            if t.shape() != [c] {
                return Err(TensorError::Other(format!(
                    "batch norm {name} must have shape [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        let (mean, var, train) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(TensorError::Other(format!(
                        "running stats must have {c} channels, got {}/{}",
                        rm.len(),
                        rv.len()
                    )));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
            None => {
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                for ch in 0..c {
                    let sl = &tx.data()[ch * m..(ch + 1) * m];
                    let mu: f64 = sl.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                    let v2: f64 =
                        sl.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m as f64;
                    mean.push(mu as f32);
                    var.push(v2 as f32);
                }
                (mean, var, true)
            }
        };
        let g = self.nodes[gamma.0].value.data();
        let bta = self.nodes[beta.0].value.data();
        let mut data = Vec::with_capacity(c * m);
        for ch in 0..c {
            let inv = 1.0 / (var[ch] as f64 + BN_EPS).sqrt();
            let (ga, be) = (g[ch] as f64, bta[ch] as f64);
            let mu = mean[ch] as f64;
            for &v in &tx.data()[ch * m..(ch + 1) * m] {
                data.push((ga * (v as f64 - mu) * inv + be) as f32);
            }
        }
        let v = Tensor::from_op(self.nodes[x.0].value.shape().to_vec(), data, "batch_norm")?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            },
            rg,
        ))
    }

    /// The (mean, var) a batch-norm node used, for running-stat updates.
    pub fn bn_stats(&self, id: NodeId) -> Option<(&[f32], &[f32])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ── Loss ──────────────────────────────────────────────────────

    /// Binary cross-entropy on a probability (numel-1 node), computed in
    /// f64 with the probability clamped to `[1e-7, 1 − 1e-7]`.
    /// `pos_weight` scales the positive-class term.
    pub fn bce_loss(&mut self, p: NodeId, target: f32, pos_weight: f32) -> Result<NodeId> {
        let tp = &self.nodes[p.0].value;
        if tp.numel() != 1 {
            return Err(TensorError::Other(format!(
                "bce loss expects a single probability, got shape {:?}",
                tp.shape()
            )));
        }
        if !(0.0..=1.0).contains(&target) || !pos_weight.is_finite() || pos_weight <= 0.0 {
            return Err(TensorError::Other(format!(
                "bce loss target {target} / pos_weight {pos_weight} out of range"
            )));
        }
        let pc = (tp.data()[0] as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let (t, w) = (target as f64, pos_weight as f64);
        let loss = -(w * t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        let v = Tensor::from_op(vec![], vec![loss as f32], "bce_loss")?;
        let rg = self.needs(&[p]);
        Ok(self.push(
            v,
            Op::BceLoss {
                p,
                target,
                pos_weight,
            },
            rg,
        ))
    }

    // ── Backward ──────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Returns per-node gradients for
    /// every node with `requires_grad`; leaves that require grad but do
    /// not influence the loss get zero-filled gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        // Leaves requiring grad that the loss never touched: zero grads.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<f32>>],
        id: NodeId,
    ) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]))
    }

    fn propagate(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(g) = self.grad_buf(grads, id) {
                        for (gv, &u) in g.iter_mut().zip(gy) {
                            *gv += u;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let vb: Vec<f32> = self.nodes[b.0].value.data().to_vec();
                    let g = self.grad_buf(grads, a).expect("requires_grad");
                    for ((gv, &u), &o) in g.iter_mut().zip(gy).zip(&vb) {
                        *gv += u * o;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let va: Vec<f32> = self.nodes[a.0].value.data().to_vec();
                    let g = self.grad_buf(grads, b).expect("requires_grad");
                    for ((gv, &u), &o) in g.iter_mut().zip(gy).zip(&va) {
                        *gv += u * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(g) = self.grad_buf(grads, *a) {
                    for (gv, &u) in g.iter_mut().zip(gy) {
                        *gv += u * c;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    for gv in g.iter_mut() {
                        *gv += gy[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let share = (gy[0] as f64 / n) as f32;
                if let Some(g) = self.grad_buf(grads, *a) {
                    for gv in g.iter_mut() {
                        *gv += share;
                    }
                }
            }
            Op::Relu(a) => {
                let mask: Vec<bool> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .map(|&x| x > 0.0)
                    .collect();
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((gv, &u), keep) in g.iter_mut().zip(gy).zip(mask) {
                        if keep {
                            *gv += u;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y: Vec<f32> = self.nodes[i].value.data().to_vec();
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((gv, &u), yv) in g.iter_mut().zip(gy).zip(y) {
                        *gv += u * yv * (1.0 - yv);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let tw = &self.nodes[w.0].value;
                let (out, inp) = (tw.shape()[0], tw.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let wd: Vec<f32> = tw.data().to_vec();
                    let g = self.grad_buf(grads, x).expect("requires_grad");
                    for ii in 0..inp {
                        let mut acc = 0f64;
                        for o in 0..out {
                            acc += gy[o] as f64 * wd[o * inp + ii] as f64;
                        }
                        g[ii] += acc as f32;
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let xd: Vec<f32> = self.nodes[x.0].value.data().to_vec();
                    let g = self.grad_buf(grads, w).expect("requires_grad");
                    for o in 0..out {
                        for ii in 0..inp {
                            g[o * inp + ii] += gy[o] * xd[ii];
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(g) = self.grad_buf(grads, b) {
                        for (gv, &u) in g.iter_mut().zip(gy) {
                            *gv += u;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let parts = parts.clone();
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0usize;
                for part in parts {
                    let span = self.nodes[part.0].value.shape()[axis];
                    if let Some(g) = self.grad_buf(grads, part) {
                        for o in 0..outer {
                            for a in 0..span {
                                let src = (o * total_axis + offset + a) * inner;
                                let dst = (o * span + a) * inner;
                                for k in 0..inner {
                                    g[dst + k] += gy[src + k];
                                }
                            }
                        }
                    }
                    offset += span;
                }
            }
            Op::Conv { x, w, b, spec } => {
                let (x, w, b) = (*x, *w, *b);
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                // conv_backward fills all three at once; use scratch
                // buffers then add into whichever operands require grad.
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                let mut gb = b.map(|b| vec![0.0; self.nodes[b.0].value.numel()]);
                conv::conv_backward(
                    tx.data(),
                    tx.shape(),
                    tw.data(),
                    tw.shape(),
                    spec,
                    gy,
                    &mut gx,
                    &mut gw,
                    gb.as_deref_mut(),
                )
                .expect("forward already validated conv shapes");
                if let Some(g) = self.grad_buf(grads, x) {
                    for (gv, u) in g.iter_mut().zip(gx) {
                        *gv += u;
                    }
                }
                if let Some(g) = self.grad_buf(grads, w) {
                    for (gv, u) in g.iter_mut().zip(gw) {
                        *gv += u;
                    }
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    if let Some(g) = self.grad_buf(grads, b) {
                        for (gv, u) in g.iter_mut().zip(gb) {
                            *gv += u;
                        }
                    }
                }
            }
            Op::MaxPool { x, arg } => {
                let arg = arg.clone();
                if let Some(g) = self.grad_buf(grads, *x) {
                    conv::max_pool_backward(&arg, gy, g);
                }
            }
            Op::AvgPool { x, spec } => {
                let x = *x;
                let spec = spec.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                if let Some(g) = self.grad_buf(grads, x) {
                    conv::avg_pool_backward(&shape, &spec, gy, g)
                        .expect("forward already validated pool shapes");
                }
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                if let Some(g) = self.grad_buf(grads, x) {
                    conv::global_avg_pool_backward(&shape, gy, g);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let mean = mean.clone();
                let var = var.clone();
                let tx = &self.nodes[x.0].value;
                let c = tx.shape()[0];
                let m: usize = tx.shape()[1..].iter().product();
                let gam: Vec<f32> = self.nodes[gamma.0].value.data().to_vec();
                let xd: Vec<f32> = tx.data().to_vec();
                // Per channel: x̂, Σg, Σg·x̂ in f64.
                let mut gsum = vec![0f64; c];
                let mut gxhat = vec![0f64; c];
                let mut xhat = vec![0f32; c * m];
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] as f64 + BN_EPS).sqrt();
                    let mu = mean[ch] as f64;
                    for k in 0..m {
                        let idx = ch * m + k;
                        let xh = (xd[idx] as f64 - mu) * inv;
                        xhat[idx] = xh as f32;
                        gsum[ch] += gy[idx] as f64;
                        gxhat[ch] += gy[idx] as f64 * xh;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let g = self.grad_buf(grads, x).expect("requires_grad");
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] as f64 + BN_EPS).sqrt();
                        let ga = gam[ch] as f64;
                        for k in 0..m {
                            let idx = ch * m + k;
                            let u = gy[idx] as f64;
                            let d = if train {
                                // d/dx of normalization including the
                                // dependence of μ and σ² on x.
                                ga * inv
                                    * (u - gsum[ch] / m as f64
                                        - xhat[idx] as f64 * gxhat[ch] / m as f64)
                            } else {
                                ga * inv * u
                            };
                            g[idx] += d as f32;
                        }
                    }
                }
                if let Some(g) = self.grad_buf(grads, gamma) {
                    for ch in 0..c {
                        g[ch] += gxhat[ch] as f32;
                    }
                }
                if let Some(g) = self.grad_buf(grads, beta) {
                    for ch in 0..c {
                        g[ch] += gsum[ch] as f32;
                    }
                }
            }
            Op::BceLoss {
                p,
                target,
                pos_weight,
            } => {
                let (p, t, w) = (*p, *target as f64, *pos_weight as f64);
                let pv = self.nodes[p.0].value.data()[0] as f64;
                if let Some(g) = self.grad_buf(grads, p) {
                    // Clamp makes the loss flat outside the band.
                    if (BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                        let d = -(w * t / pv) + (1.0 - t) / (1.0 - pv);
                        g[0] += (gy[0] as f64 * d) as f32;
                    }
                }
            }
        }
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    let x = x as f64;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y as f32
}

// ── Gradients ─────────────────────────────────────────────────────────

/// Result of a backward sweep: one flat gradient buffer per node that
/// required grad.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    /// Gradient for a node that is known to require grad.
    pub fn wrt(&self, id: NodeId) -> &[f32] {
        self.get(id).expect("node does not require grad")
    }
}

// ── Tests ─────────────────────────────────────────────────────────────
