//! Recorded computation tape and reverse-mode gradients.
//!
//! A tape owns every intermediate value of one forward computation. Node ids
//! are assigned in creation order, so inputs always precede their consumers
//! and the backward pass is a single reverse sweep that visits each node at
//! most once. A tape is single-owner: independent tapes may run on separate
//! threads, one tape never crosses threads mid-computation.

use crate::error::{CoreError, Result};
use crate::tensor::{dot, mm_nn, mm_nt, mm_tn, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValId(pub(crate) usize);

/// Blend rule applied by [`Tape::inject_rows`].
///
/// `Linear` is `λ·v + β·a`; the add-only variant is expressed as `Linear`
/// with a constant β of 1. `ConvexScaled` is `(λ·v + (1−λ)·a)·β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendKind {
    Linear,
    ConvexScaled,
}

enum Op {
    Leaf,
    Add(ValId, ValId),
    AddRow(ValId, ValId),
    Mul(ValId, ValId),
    Scale(ValId, f64),
    MatMul(ValId, ValId),
    MatMulNT(ValId, ValId),
    SoftmaxRows(ValId),
    LayerNormRows { x: ValId, gain: ValId, bias: ValId },
    Gelu(ValId),
    GatherRows { table: ValId, ids: Vec<u32> },
    SliceRows { x: ValId, start: usize, len: usize },
    SliceCols { x: ValId, start: usize, len: usize },
    ConcatCols(Vec<ValId>),
    SumAll(ValId),
    Softplus(ValId),
    PerturbRows { x: ValId, eta: ValId, gamma: f64 },
    InjectRows {
        acts: ValId,
        context: ValId,
        lambda: ValId,
        beta: ValId,
        rows: Vec<usize>,
        kind: BlendKind,
    },
    GatherLogSoftmax { logits: ValId, picks: Vec<(usize, u32)> },
    NextTokenCe { logits: ValId, next_ids: Vec<u32> },
}

struct Node {
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by value id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a scalar parameter, 0.0 when disconnected from the loss.
    pub fn scalar(&self, id: ValId) -> f64 {
        self.get(id).map(|t| t.scalar_value()).unwrap_or(0.0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    params: Vec<ValId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[ValId] {
        &self.params
    }

    fn push(&mut self, op: Op, val: Tensor, needs_grad: bool) -> ValId {
        let id = ValId(self.nodes.len());
        self.nodes.push(Node { op, needs_grad });
        self.vals.push(val);
        id
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> ValId {
        self.push(Op::Leaf, t, false)
    }

    /// Register a trainable leaf; its gradient is produced by `backward`.
    pub fn parameter(&mut self, t: Tensor) -> ValId {
        let id = self.push(Op::Leaf, t, true);
        self.params.push(id);
        id
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data);
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, grad))
    }

    /// Broadcast-add a length-n vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: ValId, b: ValId) -> Result<ValId> {
        let (m, n) = self.vals[x.0].dims2();
        if self.vals[b.0].numel() != n {
            return Err(shape_err("add_row", format!("row len {} vs {}", n, self.vals[b.0].numel())));
        }
        let xs = self.vals[x.0].data();
        let bs = self.vals[b.0].data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xs[i * n + j] + bs[j]);
            }
        }
        let out = Tensor::from_raw(vec![m, n], data);
        let grad = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddRow(x, b), out, grad))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data);
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, grad))
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let t = &self.vals[x.0];
        let data: Vec<f64> = t.data().iter().map(|v| c * v).collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x);
        self.push(Op::Scale(x, c), out, grad)
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k) = self.vals[a.0].dims2();
        let (k2, n) = self.vals[b.0].dims2();
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let data = mm_nn(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n);
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_raw(vec![m, n], data), grad))
    }

    /// `A·Bᵀ` for A `[m×k]`, B `[n×k]`.
    pub fn matmul_nt(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k) = self.vals[a.0].dims2();
        let (n, k2) = self.vals[b.0].dims2();
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let data = mm_nt(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n);
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::from_raw(vec![m, n], data), grad))
    }

    /// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12.
    pub fn softmax_rows(&mut self, x: ValId) -> Result<ValId> {
        let t = &self.vals[x.0];
        let (rows, n) = row_view(t);
        let mut data = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let row = &t.data()[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            let mut e = vec![0.0; n];
            for j in 0..n {
                e[j] = (row[j] - m).exp();
                s += e[j];
            }
            for v in &e {
                data.push(v / s);
            }
        }
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), out, grad))
    }

    /// Row-wise layer norm: zero mean, unit variance (ε = 1e-5 inside the
    /// square root), then `gain ⊙ x̂ + bias`.
    pub fn layer_norm_rows(&mut self, x: ValId, gain: ValId, bias: ValId) -> Result<ValId> {
        let t = &self.vals[x.0];
        let (rows, n) = row_view(t);
        if self.vals[gain.0].numel() != n || self.vals[bias.0].numel() != n {
            return Err(shape_err("layer_norm", format!("gain/bias len vs row len {}", n)));
        }
        let g = self.vals[gain.0].data();
        let b = self.vals[bias.0].data();
        let mut data = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let row = &t.data()[i * n..(i + 1) * n];
            let (mean, inv) = ln_stats(row);
            for j in 0..n {
                data.push(g[j] * ((row[j] - mean) * inv) + b[j]);
            }
        }
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNormRows { x, gain, bias }, out, grad))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: ValId) -> ValId {
        let t = &self.vals[x.0];
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x);
        self.push(Op::Gelu(x), out, grad)
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn gather_rows(&mut self, table: ValId, ids: &[u32]) -> Result<ValId> {
        let (v, d) = self.vals[table.0].dims2();
        for &id in ids {
            if id as usize >= v {
                return Err(CoreError::UnknownTokenId { id, vocab: v });
            }
        }
        let src = self.vals[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor::from_raw(vec![ids.len(), d], data);
        let grad = self.needs(table);
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, out, grad))
    }

    pub fn slice_rows(&mut self, x: ValId, start: usize, len: usize) -> Result<ValId> {
        let (m, n) = self.vals[x.0].dims2();
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {m}")));
        }
        let data = self.vals[x.0].data()[start * n..(start + len) * n].to_vec();
        let grad = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, len }, Tensor::from_raw(vec![len, n], data), grad))
    }

    pub fn slice_cols(&mut self, x: ValId, start: usize, len: usize) -> Result<ValId> {
        let (m, n) = self.vals[x.0].dims2();
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let src = self.vals[x.0].data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let grad = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::from_raw(vec![m, len], data), grad))
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(CoreError::EmptyInput("concat_cols"));
        }
        let m = self.vals[parts[0].0].dims2().0;
        let mut total = 0;
        for p in parts {
            let (mi, ni) = self.vals[p.0].dims2();
            if mi != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {mi}")));
            }
            total += ni;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let (_, ni) = self.vals[p.0].dims2();
                data.extend_from_slice(&self.vals[p.0].data()[i * ni..(i + 1) * ni]);
            }
        }
        let grad = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_raw(vec![m, total], data), grad))
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let s: f64 = self.vals[x.0].data().iter().sum();
        let grad = self.needs(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), grad)
    }

    pub fn softplus(&mut self, x: ValId) -> ValId {
        let t = &self.vals[x.0];
        let data: Vec<f64> = t.data().iter().map(|&v| softplus(v)).collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x);
        self.push(Op::Softplus(x), out, grad)
    }

    /// Per-row norm-scaled Gaussian perturbation: `out_i = x_i + γ‖x_i‖₂·η_i`.
    ///
    /// `eta` must be a constant leaf of the same shape as `x`; the gradient
    /// flows through the stream norm, not through the draw.
    pub fn perturb_rows(&mut self, x: ValId, eta: ValId, gamma: f64) -> Result<ValId> {
        let t = &self.vals[x.0];
        if self.vals[eta.0].shape() != t.shape() {
            return Err(shape_err("perturb_rows", "eta shape".into()));
        }
        let (rows, n) = row_view(t);
        let xs = t.data();
        let es = self.vals[eta.0].data();
        let mut data = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let row = &xs[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            let f = gamma * norm;
            for j in 0..n {
                data.push(row[j] + f * es[i * n + j]);
            }
        }
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let grad = self.needs(x);
        Ok(self.push(Op::PerturbRows { x, eta, gamma }, out, grad))
    }

    /// Blend a context direction into selected rows of an activation matrix.
    ///
    /// Non-selected rows pass through untouched. `lambda` and `beta` are
    /// scalar values on the tape so calibration receives their gradients.
    pub fn inject_rows(
        &mut self,
        acts: ValId,
        context: ValId,
        lambda: ValId,
        beta: ValId,
        rows: &[usize],
        kind: BlendKind,
    ) -> Result<ValId> {
        let (m, n) = self.vals[acts.0].dims2();
        if self.vals[context.0].numel() != n {
            return Err(shape_err("inject_rows", format!("context len vs row len {}", n)));
        }
        if !self.vals[lambda.0].is_scalar() || !self.vals[beta.0].is_scalar() {
            return Err(shape_err("inject_rows", "lambda/beta must be scalars".into()));
        }
        for &r in rows {
            if r >= m {
                return Err(shape_err("inject_rows", format!("row {r} out of {m}")));
            }
        }
        let lam = self.vals[lambda.0].scalar_value();
        let bet = self.vals[beta.0].scalar_value();
        let ctx = self.vals[context.0].data();
        let mut data = self.vals[acts.0].data().to_vec();
        for &r in rows {
            let row = &mut data[r * n..(r + 1) * n];
            match kind {
                BlendKind::Linear => {
                    for j in 0..n {
                        row[j] = lam * ctx[j] + bet * row[j];
                    }
                }
                BlendKind::ConvexScaled => {
                    for j in 0..n {
                        row[j] = (lam * ctx[j] + (1.0 - lam) * row[j]) * bet;
                    }
                }
            }
        }
        let grad = self.needs(acts) || self.needs(lambda) || self.needs(beta);
        let op = Op::InjectRows { acts, context, lambda, beta, rows: rows.to_vec(), kind };
        Ok(self.push(op, Tensor::from_raw(vec![m, n], data), grad))
    }

    /// Sum of `log softmax(logits[row])[col]` over the given picks.
    pub fn gather_log_softmax(&mut self, logits: ValId, picks: &[(usize, u32)]) -> Result<ValId> {
        if picks.is_empty() {
            return Err(CoreError::EmptyInput("gather_log_softmax picks"));
        }
        let (m, v) = self.vals[logits.0].dims2();
        for &(r, c) in picks {
            if r >= m || c as usize >= v {
                return Err(shape_err("gather_log_softmax", format!("pick ({r},{c}) out of [{m}x{v}]")));
            }
        }
        let xs = self.vals[logits.0].data();
        let mut total = 0.0;
        for &(r, c) in picks {
            let row = &xs[r * v..(r + 1) * v];
            total += row[c as usize] - log_sum_exp(row);
        }
        let grad = self.needs(logits);
        let op = Op::GatherLogSoftmax { logits, picks: picks.to_vec() };
        Ok(self.push(op, Tensor::scalar(total), grad))
    }

    /// Mean next-token cross-entropy: row `t` of the logits predicts
    /// `next_ids[t]`, for `t` in `0..T-1`.
    pub fn next_token_ce(&mut self, logits: ValId, next_ids: &[u32]) -> Result<ValId> {
        let (m, v) = self.vals[logits.0].dims2();
        if next_ids.len() != m - 1 || m < 2 {
            return Err(shape_err("next_token_ce", format!("{} targets for {} rows", next_ids.len(), m)));
        }
        for &c in next_ids {
            if c as usize >= v {
                return Err(CoreError::UnknownTokenId { id: c, vocab: v });
            }
        }
        let xs = self.vals[logits.0].data();
        let mut total = 0.0;
        for (t, &c) in next_ids.iter().enumerate() {
            let row = &xs[t * v..(t + 1) * v];
            total -= row[c as usize] - log_sum_exp(row);
        }
        let loss = total / next_ids.len() as f64;
        let grad = self.needs(logits);
        let op = Op::NextTokenCe { logits, next_ids: next_ids.to_vec() };
        Ok(self.push(op, Tensor::scalar(loss), grad))
    }

    /// Reverse-mode sweep from a scalar loss. Every trainable parameter that
    /// the loss depends on receives exactly its gradient; constants and
    /// disconnected parameters receive none.
    pub fn backward(&self, loss: ValId) -> Result<Gradients> {
        let lt = &self.vals[loss.0];
        if !lt.is_scalar() {
            return Err(shape_err("backward", format!("loss has shape {:?}", lt.shape())));
        }
        if !lt.scalar_value().is_finite() {
            return Err(CoreError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.vjp(id, &gout, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }

        let out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| Tensor::from_raw(self.vals[i].shape().to_vec(), v)))
            .collect();
        for p in &self.params {
            if let Some(g) = &out[p.0] {
                if !g.all_finite() {
                    return Err(CoreError::NonFinite("parameter gradient".into()));
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn vjp(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, grads, |g| add_assign(g, gout));
                self.acc(*b, grads, |g| add_assign(g, gout));
            }
            Op::AddRow(x, b) => {
                self.acc(*x, grads, |g| add_assign(g, gout));
                let n = self.vals[b.0].numel();
                self.acc(*b, grads, |g| {
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.vals[a.0].data(), self.vals[b.0].data());
                self.acc(*a, grads, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * tb[i];
                    }
                });
                self.acc(*b, grads, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ta[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, grads, |g| {
                    for i in 0..g.len() {
                        g[i] += c * gout[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.vals[a.0].dims2();
                let (_, n) = self.vals[b.0].dims2();
                if self.needs(*a) {
                    let da = mm_nt(gout, self.vals[b.0].data(), m, n, k);
                    self.acc(*a, grads, |g| add_assign(g, &da));
                }
                if self.needs(*b) {
                    let db = mm_tn(self.vals[a.0].data(), gout, m, k, n);
                    self.acc(*b, grads, |g| add_assign(g, &db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.vals[a.0].dims2();
                let (n, _) = self.vals[b.0].dims2();
                if self.needs(*a) {
                    let da = mm_nn(gout, self.vals[b.0].data(), m, n, k);
                    self.acc(*a, grads, |g| add_assign(g, &da));
                }
                if self.needs(*b) {
                    let db = mm_tn(gout, self.vals[a.0].data(), m, n, k);
                    self.acc(*b, grads, |g| add_assign(g, &db));
                }
            }
            Op::SoftmaxRows(x) => {
                let p = self.vals[id].data();
                let (rows, n) = row_view(&self.vals[id]);
                self.acc(*x, grads, |g| {
                    for i in 0..rows {
                        let pr = &p[i * n..(i + 1) * n];
                        let go = &gout[i * n..(i + 1) * n];
                        let s = dot(go, pr);
                        for j in 0..n {
                            g[i * n + j] += pr[j] * (go[j] - s);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias } => {
                let t = &self.vals[x.0];
                let (rows, n) = row_view(t);
                let xs = t.data();
                let gs = self.vals[gain.0].data();
                for i in 0..rows {
                    let row = &xs[i * n..(i + 1) * n];
                    let go = &gout[i * n..(i + 1) * n];
                    let (mean, inv) = ln_stats(row);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    if self.needs(*bias) {
                        self.acc(*bias, grads, |g| add_assign(g, go));
                    }
                    if self.needs(*gain) {
                        self.acc(*gain, grads, |g| {
                            for j in 0..n {
                                g[j] += go[j] * xhat[j];
                            }
                        });
                    }
                    if self.needs(*x) {
                        let dxh: Vec<f64> = (0..n).map(|j| go[j] * gs[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dxh, &xhat) / n as f64;
                        self.acc(*x, grads, |g| {
                            for j in 0..n {
                                g[i * n + j] += inv * (dxh[j] - m1 - xhat[j] * m2);
                            }
                        });
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.vals[x.0].data();
                self.acc(*x, grads, |g| {
                    for i in 0..g.len() {
                        let v = xs[i];
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g[i] += gout[i] * d;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.vals[table.0].dims2().1;
                self.acc(*table, grads, |g| {
                    for (i, &tok) in ids.iter().enumerate() {
                        let dst = &mut g[tok as usize * d..(tok as usize + 1) * d];
                        for j in 0..d {
                            dst[j] += gout[i * d + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let n = self.vals[x.0].dims2().1;
                let (start, len) = (*start, *len);
                self.acc(*x, grads, |g| {
                    g[start * n..(start + len) * n]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.vals[x.0].dims2();
                let (start, len) = (*start, *len);
                self.acc(*x, grads, |g| {
                    for i in 0..m {
                        for j in 0..len {
                            g[i * n + start + j] += gout[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.vals[id].dims2().0;
                let total = self.vals[id].dims2().1;
                let mut offset = 0;
                for p in parts {
                    let ni = self.vals[p.0].dims2().1;
                    if self.needs(*p) {
                        let off = offset;
                        self.acc(*p, grads, |g| {
                            for i in 0..m {
                                for j in 0..ni {
                                    g[i * ni + j] += gout[i * total + off + j];
                                }
                            }
                        });
                    }
                    offset += ni;
                }
            }
            Op::SumAll(x) => {
                let g0 = gout[0];
                self.acc(*x, grads, |g| {
                    for v in g.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::Softplus(x) => {
                let xs = self.vals[x.0].data();
                self.acc(*x, grads, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / (1.0 + (-xs[i]).exp());
                    }
                });
            }
            Op::PerturbRows { x, eta, gamma } => {
                let t = &self.vals[x.0];
                let (rows, n) = row_view(t);
                let xs = t.data();
                let es = self.vals[eta.0].data();
                let gamma = *gamma;
                self.acc(*x, grads, |g| {
                    for i in 0..rows {
                        let row = &xs[i * n..(i + 1) * n];
                        let go = &gout[i * n..(i + 1) * n];
                        let norm = dot(row, row).sqrt();
                        let ge = dot(go, &es[i * n..(i + 1) * n]);
                        let coef = if norm > 0.0 { gamma * ge / norm } else { 0.0 };
                        for j in 0..n {
                            g[i * n + j] += go[j] + coef * row[j];
                        }
                    }
                });
            }
            Op::InjectRows { acts, context, lambda, beta, rows, kind } => {
                let (m, n) = self.vals[acts.0].dims2();
                let ctx = self.vals[context.0].data();
                let a = self.vals[acts.0].data();
                let lam = self.vals[lambda.0].scalar_value();
                let bet = self.vals[beta.0].scalar_value();
                let mut in_target = vec![false; m];
                for &r in rows {
                    in_target[r] = true;
                }
                let (mut dlam, mut dbet) = (0.0, 0.0);
                for &r in rows {
                    let go = &gout[r * n..(r + 1) * n];
                    let ar = &a[r * n..(r + 1) * n];
                    match kind {
                        BlendKind::Linear => {
                            dlam += dot(go, ctx);
                            dbet += dot(go, ar);
                        }
                        BlendKind::ConvexScaled => {
                            for j in 0..n {
                                dlam += go[j] * bet * (ctx[j] - ar[j]);
                                dbet += go[j] * (lam * ctx[j] + (1.0 - lam) * ar[j]);
                            }
                        }
                    }
                }
                if self.needs(*lambda) {
                    self.acc(*lambda, grads, |g| g[0] += dlam);
                }
                if self.needs(*beta) {
                    self.acc(*beta, grads, |g| g[0] += dbet);
                }
                if self.needs(*acts) {
                    let row_factor = match kind {
                        BlendKind::Linear => bet,
                        BlendKind::ConvexScaled => (1.0 - lam) * bet,
                    };
                    self.acc(*acts, grads, |g| {
                        for i in 0..m {
                            let f = if in_target[i] { row_factor } else { 1.0 };
                            for j in 0..n {
                                g[i * n + j] += f * gout[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::GatherLogSoftmax { logits, picks } => {
                let (_, v) = self.vals[logits.0].dims2();
                let xs = self.vals[logits.0].data();
                let g0 = gout[0];
                self.acc(*logits, grads, |g| {
                    for &(r, c) in picks {
                        let row = &xs[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            g[r * v + j] += g0 * (f64::from(j as u32 == c) - p);
                        }
                    }
                });
            }
            Op::NextTokenCe { logits, next_ids } => {
                let (_, v) = self.vals[logits.0].dims2();
                let xs = self.vals[logits.0].data();
                let g0 = gout[0] / next_ids.len() as f64;
                self.acc(*logits, grads, |g| {
                    for (t, &c) in next_ids.iter().enumerate() {
                        let row = &xs[t * v..(t + 1) * v];
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            g[t * v + j] += g0 * (p - f64::from(j as u32 == c));
                        }
                    }
                });
            }
        }
    }

    fn acc<F: FnOnce(&mut Vec<f64>)>(&self, id: ValId, grads: &mut [Option<Vec<f64>>], f: F) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.vals[id.0].numel()]);
        }
        f(slot.as_mut().unwrap());
    }
}

fn row_view(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        other => panic!("row_view on shape {:?}", other),
    }
}

fn ln_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of the softplus transform, defined for positive values.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1), rewritten to stay stable for large y.
    y + (-(-y).exp()).ln_1p()
}

fn add_assign(g: &mut [f64], d: &[f64]) {
    debug_assert_eq!(g.len(), d.len());
    for i in 0..g.len() {
        g[i] += d[i];
    }
}

fn shape_err(op: &'static str, details: String) -> CoreError {
    CoreError::ShapeMismatch { op, details }
}
