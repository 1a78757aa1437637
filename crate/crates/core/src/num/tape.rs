//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! A `Tape` is built per forward pass, borrowing the parameter store
//! read-only. `backward` walks the recorded nodes in reverse and returns
//! accumulated gradients for every reachable *trainable* parameter; frozen
//! parameters receive no gradient at all.

use super::kernels as kn;
use super::store::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, F),
    MatMul(NodeId, NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, inv: Vec<F> },
    CausalConv { x: NodeId, w: NodeId, bias: NodeId, stride: usize },
    UpsampleRows { x: NodeId, factor: usize },
    Reshape { x: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, rope_base: F, probs: Tensor<F>, qr: Tensor<F>, kr: Tensor<F> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    MergeRows { parts: Vec<(Vec<usize>, NodeId)> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { a: NodeId, b: NodeId },
    MeanAll(NodeId),
    SumAll(NodeId),
    CrossEntropyMean { logits: NodeId, targets: Vec<usize>, probs: Tensor<F> },
    BceLogitsMean { logits: NodeId, labels: Vec<F> },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
}

impl<'s, F: Real> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.store.value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.value(id).shape
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        id
    }

    /// Leaf referring to a stored parameter; trainable parameters are the
    /// gradient sinks of the tape.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        let needs = self.store.trainable(p);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: Value::Param(p), op: Op::Leaf { param: Some(p) }, needs_grad: needs });
        id
    }

    /// Leaf holding plain data, not differentiated.
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Leaf holding data that *is* differentiated (finite-difference checks).
    pub fn input(&mut self, t: Tensor<F>, needs_grad: bool) -> NodeId {
        self.push(t, Op::Leaf { param: None }, needs_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `x [.., d] + bias [d]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        assert_eq!(tb.shape, vec![d], "bias must be [last_dim]");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(&tb.data) {
                *o = *o + b;
            }
        }
        let t = Tensor::new(tx.shape.clone(), data);
        let ng = self.needs(x) || self.needs(bias);
        self.push(t, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let t = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = kn::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(kn::gelu);
        let ng = self.needs(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(kn::silu);
        let ng = self.needs(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(kn::sigmoid);
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let cols = ta.last_dim();
        let mut t = ta.clone();
        kn::softmax_rows_inplace(&mut t.data, cols);
        let ng = self.needs(a);
        self.push(t, Op::SoftmaxLast(a), ng)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: F) -> NodeId {
        let (t, inv) = kn::rms_norm(self.value(x), &self.value(gain).data, eps);
        let ng = self.needs(x) || self.needs(gain);
        self.push(t, Op::RmsNorm { x, gain, inv }, ng)
    }

    pub fn causal_conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize) -> NodeId {
        let t = kn::causal_conv1d(self.value(x), self.value(w), &self.value(bias).data, stride);
        let ng = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(t, Op::CausalConv { x, w, bias, stride }, ng)
    }

    pub fn upsample_rows(&mut self, x: NodeId, factor: usize) -> NodeId {
        let t = kn::upsample_rows(self.value(x), factor);
        let ng = self.needs(x);
        self.push(t, Op::UpsampleRows { x, factor }, ng)
    }

    /// Same data, new extents (row-major reinterpretation).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let t = Tensor::new(shape, tx.data.clone());
        let ng = self.needs(x);
        self.push(t, Op::Reshape { x }, ng)
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, rope_base: F) -> NodeId {
        let (out, probs, qr, kr) = kn::causal_attention(self.value(q), self.value(k), self.value(v), heads, rope_base);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, rope_base, probs, qr, kr }, ng)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![idx.len(), d], data);
        let ng = self.needs(x);
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Scatters row blocks into a `[rows, d]` tensor. The index lists must be
    /// disjoint and cover `0..rows` between them.
    pub fn merge_rows(&mut self, rows: usize, parts: &[(Vec<usize>, NodeId)]) -> NodeId {
        let d = parts
            .iter()
            .find(|(idx, _)| !idx.is_empty())
            .map(|(_, n)| self.value(*n).last_dim())
            .expect("merge_rows needs at least one non-empty part");
        let mut data = vec![F::zero(); rows * d];
        let mut seen = vec![false; rows];
        for (idx, node) in parts {
            let tv = self.value(*node);
            assert_eq!(tv.rows(), idx.len(), "merge_rows part row count mismatch");
            for (r, &dst) in idx.iter().enumerate() {
                assert!(!std::mem::replace(&mut seen[dst], true), "merge_rows overlapping index {dst}");
                data[dst * d..(dst + 1) * d].copy_from_slice(tv.row(r));
            }
        }
        assert!(seen.iter().all(|&s| s), "merge_rows does not cover all rows");
        let ng = parts.iter().any(|(_, n)| self.needs(*n));
        let t = Tensor::new(vec![rows, d], data);
        self.push(t, Op::MergeRows { parts: parts.to_vec() }, ng)
    }

    /// `[r, ca] ++ [r, cb] -> [r, ca+cb]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = ta.rows();
        assert_eq!(rows, tb.rows(), "concat_cols row mismatch");
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![rows, ca + cb], data), Op::ConcatCols { a, b }, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = self.value(x);
        let d = tx.last_dim();
        assert!(start + len <= d, "slice_cols out of range");
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data);
        let ng = self.needs(x);
        self.push(t, Op::SliceCols { x, start, len }, ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        assert!(ta.numel() > 0, "mean_all of empty tensor");
        let n = F::fl(ta.numel() as f64);
        let s = ta.data.iter().copied().sum::<F>() / n;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().copied().sum::<F>();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Mean cross-entropy of `softmax(logits)` rows against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let tl = self.value(logits);
        let v = tl.last_dim();
        assert_eq!(tl.rows(), targets.len(), "cross_entropy target count mismatch");
        assert!(!targets.is_empty(), "cross_entropy over empty target set");
        let mut probs = tl.clone();
        kn::softmax_rows_inplace(&mut probs.data, v);
        let mut loss = F::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            assert!(tgt < v, "cross_entropy target out of range");
            let p = probs.data[r * v + tgt];
            loss = loss - p.max(F::fl(1e-30)).ln();
        }
        loss = loss / F::fl(targets.len() as f64);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropyMean { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against labels in {0,1}.
    pub fn bce_logits_mean(&mut self, logits: NodeId, labels: &[F]) -> NodeId {
        let tl = self.value(logits);
        assert_eq!(tl.numel(), labels.len(), "bce label count mismatch");
        assert!(!labels.is_empty(), "bce over empty label set");
        let mut loss = F::zero();
        for (&l, &y) in tl.data.iter().zip(labels) {
            // max(l,0) - l*y + ln(1+exp(-|l|))
            loss = loss + l.max(F::zero()) - l * y + (F::one() + (-l.abs()).exp()).ln();
        }
        loss = loss / F::fl(labels.len() as f64);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::BceLogitsMean { logits, labels: labels.to_vec() }, ng)
    }

    /// Reverse pass from a scalar loss. Returns gradients for reachable
    /// trainable parameters.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, contrib: Tensor<F>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&contrib.data) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn apply_backward(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>], out: &mut Gradients<F>) {
        match &self.nodes[i].op {
            Op::Leaf { param } => {
                if let Some(p) = param {
                    if self.store.trainable(*p) {
                        out.accumulate(*p, g.clone());
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect());
                let db = Tensor::new(g.shape.clone(), g.data.iter().zip(&ta.data).map(|(&x, &y)| x * y).collect());
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                let d = self.value(*bias).numel();
                let mut db = vec![F::zero(); d];
                for row in g.data.chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *bias, Tensor::new(vec![d], db));
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.map(|x| x * *c));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, kn::matmul_nt(g, tb));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, kn::matmul_tn(ta, g));
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv * kn::gelu_grad(x)).collect());
                self.acc(grads, *a, da);
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv * kn::silu_grad(x)).collect());
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = self.value(NodeId(i));
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&y.data).map(|(&gv, &s)| gv * s * (F::one() - s)).collect());
                self.acc(grads, *a, da);
            }
            Op::SoftmaxLast(a) => {
                let y = self.value(NodeId(i));
                let d = y.last_dim();
                let mut da = vec![F::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let s = kn::dot(yr, gr);
                    for j in 0..d {
                        da[r * d + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape.clone(), da));
            }
            Op::RmsNorm { x, gain, inv } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let d = tx.last_dim();
                let dn = F::fl(d as f64);
                let rows = tx.rows();
                if self.needs(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        let s = inv[r];
                        let xr = &tx.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xr[j] * s;
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(vec![d], dg));
                }
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); tx.numel()];
                    for r in 0..rows {
                        let s = inv[r];
                        let xr = &tx.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let mut t = F::zero();
                        for j in 0..d {
                            t = t + gr[j] * tg.data[j] * xr[j];
                        }
                        let c = s * s * s / dn * t;
                        for j in 0..d {
                            dx[r * d + j] = s * tg.data[j] * gr[j] - c * xr[j];
                        }
                    }
                    self.acc(grads, *x, Tensor::new(tx.shape.clone(), dx));
                }
            }
            Op::CausalConv { x, w, bias, stride } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (t_in, c_in) = (tx.shape[0], tx.shape[1]);
                let (k, _, c_out) = (tw.shape[0], tw.shape[1], tw.shape[2]);
                let t_out = g.shape[0];
                let mut dx = vec![F::zero(); tx.numel()];
                let mut dw = vec![F::zero(); tw.numel()];
                let mut db = vec![F::zero(); c_out];
                for t in 0..t_out {
                    let grow = &g.data[t * c_out..(t + 1) * c_out];
                    for (o, &v) in db.iter_mut().zip(grow) {
                        *o = *o + v;
                    }
                    for j in 0..k {
                        let tap = t * stride + j;
                        if tap < k - 1 {
                            continue;
                        }
                        let t_src = tap - (k - 1);
                        if t_src >= t_in {
                            continue;
                        }
                        for ci in 0..c_in {
                            let xv = tx.data[t_src * c_in + ci];
                            let wrow = &tw.data[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                            let mut acc = F::zero();
                            let dwrow = &mut dw[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                            for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(grow) {
                                *dwv = *dwv + xv * gv;
                                acc = acc + wv * gv;
                            }
                            dx[t_src * c_in + ci] = dx[t_src * c_in + ci] + acc;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(tx.shape.clone(), dx));
                self.acc(grads, *w, Tensor::new(tw.shape.clone(), dw));
                self.acc(grads, *bias, Tensor::new(vec![c_out], db));
            }
            Op::Reshape { x } => {
                let tx = self.value(*x);
                self.acc(grads, *x, Tensor::new(tx.shape.clone(), g.data.clone()));
            }
            Op::UpsampleRows { x, factor } => {
                let tx = self.value(*x);
                let c = tx.shape[1];
                let mut dx = vec![F::zero(); tx.numel()];
                for (t, grow) in g.data.chunks(c).enumerate() {
                    let src = t / factor;
                    let drow = &mut dx[src * c..(src + 1) * c];
                    for (o, &v) in drow.iter_mut().zip(grow) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *x, Tensor::new(tx.shape.clone(), dx));
            }
            Op::Attention { q, k, v, heads, rope_base, probs, qr, kr } => {
                let tv = self.value(*v);
                let s = qr.shape[0];
                let width = qr.shape[1];
                let dh = width / heads;
                let scale = F::one() / F::fl(dh as f64).sqrt();
                let mut dqr = Tensor::zeros(qr.shape.clone());
                let mut dkr = Tensor::zeros(kr.shape.clone());
                let mut dv = Tensor::zeros(tv.shape.clone());
                let mut d_s = vec![F::zero(); s];
                for h in 0..*heads {
                    let base = h * s * s;
                    for i in 0..s {
                        let prow = &probs.data[base + i * s..base + (i + 1) * s];
                        let grow = &g.data[i * width + h * dh..i * width + (h + 1) * dh];
                        // dA and the softmax Jacobian, row i
                        let mut row_dot = F::zero();
                        for j in 0..=i {
                            let vj = &tv.data[j * width + h * dh..j * width + (h + 1) * dh];
                            let da = kn::dot(grow, vj);
                            d_s[j] = da;
                            row_dot = row_dot + prow[j] * da;
                        }
                        for (j, ds) in d_s.iter_mut().enumerate().take(i + 1) {
                            *ds = prow[j] * (*ds - row_dot) * scale;
                        }
                        // dV_j += A_ij * g_i ; dQr_i += dS_ij * Kr_j ; dKr_j += dS_ij * Qr_i
                        let qi = &qr.data[i * width + h * dh..i * width + (h + 1) * dh];
                        let dqi = &mut dqr.data[i * width + h * dh..i * width + (h + 1) * dh];
                        for j in 0..=i {
                            let a = prow[j];
                            let ds = d_s[j];
                            let vslice = j * width + h * dh;
                            let krj = &kr.data[vslice..vslice + dh];
                            for t in 0..dh {
                                dqi[t] = dqi[t] + ds * krj[t];
                            }
                            let dkj = &mut dkr.data[vslice..vslice + dh];
                            for (t, dk) in dkj.iter_mut().enumerate() {
                                *dk = *dk + ds * qi[t];
                            }
                            let dvj = &mut dv.data[vslice..vslice + dh];
                            for (t, dvv) in dvj.iter_mut().enumerate() {
                                *dvv = *dvv + a * grow[t];
                            }
                        }
                    }
                }
                kn::rope_inverse_inplace(&mut dqr, *heads, *rope_base, 0);
                kn::rope_inverse_inplace(&mut dkr, *heads, *rope_base, 0);
                self.acc(grads, *q, dqr);
                self.acc(grads, *k, dkr);
                self.acc(grads, *v, dv);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let mut dx = vec![F::zero(); tx.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &g.data[r * d..(r + 1) * d];
                    let drow = &mut dx[src * d..(src + 1) * d];
                    for (o, &v) in drow.iter_mut().zip(grow) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *x, Tensor::new(tx.shape.clone(), dx));
            }
            Op::MergeRows { parts } => {
                let d = g.last_dim();
                for (idx, node) in parts {
                    if !self.needs(*node) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(idx.len() * d);
                    for &src in idx {
                        dp.extend_from_slice(&g.data[src * d..(src + 1) * d]);
                    }
                    self.acc(grads, *node, Tensor::new(self.value(*node).shape.clone(), dp));
                }
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, Tensor::new(self.value(*a).shape.clone(), da));
                self.acc(grads, *b, Tensor::new(self.value(*b).shape.clone(), db));
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let mut dx = vec![F::zero(); tx.numel()];
                for r in 0..tx.rows() {
                    let grow = &g.data[r * len..(r + 1) * len];
                    dx[r * d + start..r * d + start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, Tensor::new(tx.shape.clone(), dx));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let c = g.scalar_value() / F::fl(ta.numel() as f64);
                self.acc(grads, *a, Tensor::full(ta.shape.clone(), c));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, Tensor::full(ta.shape.clone(), g.scalar_value()));
            }
            Op::CrossEntropyMean { logits, targets, probs } => {
                let n = targets.len();
                let v = probs.last_dim();
                let c = g.scalar_value() / F::fl(n as f64);
                let mut dl = probs.data.clone();
                for (r, &tgt) in targets.iter().enumerate() {
                    dl[r * v + tgt] = dl[r * v + tgt] - F::one();
                }
                for x in &mut dl {
                    *x = *x * c;
                }
                self.acc(grads, *logits, Tensor::new(probs.shape.clone(), dl));
            }
            Op::BceLogitsMean { logits, labels } => {
                let tl = self.value(*logits);
                let c = g.scalar_value() / F::fl(labels.len() as f64);
                let dl = tl
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&l, &y)| (kn::sigmoid(l) - y) * c)
                    .collect();
                self.acc(grads, *logits, Tensor::new(tl.shape.clone(), dl));
            }
        }
    }
}
