//! Execution contexts. Model forward code is written once against `Cx` and
//! runs either on the autodiff [`Tape`] (training) or on plain tensors with
//! an optional KV cache (`InferCx`, incremental decoding). Both route through
//! the same kernels, so the two paths agree bit for bit on shared prefixes.

use super::kernels as kn;
use super::store::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{Real, Tensor};
use std::rc::Rc;

pub trait Cx<F: Real> {
    type T: Clone;

    fn store(&self) -> &ParamStore<F>;
    fn param(&mut self, id: ParamId) -> Self::T;
    fn constant(&mut self, t: Tensor<F>) -> Self::T;
    /// Owned copy of the tensor behind a handle.
    fn read(&self, t: &Self::T) -> Tensor<F>;
    fn shape_of(&self, t: &Self::T) -> Vec<usize>;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add_bias(&mut self, x: &Self::T, bias: &Self::T) -> Self::T;
    fn scale(&mut self, x: &Self::T, c: F) -> Self::T;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn gelu(&mut self, x: &Self::T) -> Self::T;
    fn silu(&mut self, x: &Self::T) -> Self::T;
    fn sigmoid(&mut self, x: &Self::T) -> Self::T;
    fn rms_norm(&mut self, x: &Self::T, gain: &Self::T, eps: F) -> Self::T;
    fn gather_rows(&mut self, x: &Self::T, idx: &[usize]) -> Self::T;
    fn merge_rows(&mut self, rows: usize, parts: &[(Vec<usize>, Self::T)]) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Self::T;
    fn concat_cols(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn causal_conv1d(&mut self, x: &Self::T, w: &Self::T, bias: &Self::T, stride: usize) -> Self::T;
    fn upsample_rows(&mut self, x: &Self::T, factor: usize) -> Self::T;
    fn reshape(&mut self, x: &Self::T, shape: Vec<usize>) -> Self::T;
    /// Shared causal self-attention. `layer` selects the cache slot in cached
    /// contexts; full-sequence contexts ignore it.
    fn attention(&mut self, layer: usize, q: &Self::T, k: &Self::T, v: &Self::T, heads: usize, rope_base: F) -> Self::T;
    fn mean_all(&mut self, x: &Self::T) -> Self::T;
    fn sum_all(&mut self, x: &Self::T) -> Self::T;
    fn cross_entropy_mean(&mut self, logits: &Self::T, targets: &[usize]) -> Self::T;
    fn bce_logits_mean(&mut self, logits: &Self::T, labels: &[F]) -> Self::T;
}

impl<'s, F: Real> Cx<F> for Tape<'s, F> {
    type T = NodeId;

    fn store(&self) -> &ParamStore<F> {
        Tape::store(self)
    }
    fn param(&mut self, id: ParamId) -> NodeId {
        Tape::param(self, id)
    }
    fn constant(&mut self, t: Tensor<F>) -> NodeId {
        Tape::constant(self, t)
    }
    fn read(&self, t: &NodeId) -> Tensor<F> {
        self.value(*t).clone()
    }
    fn shape_of(&self, t: &NodeId) -> Vec<usize> {
        self.shape(*t).to_vec()
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::mul(self, *a, *b)
    }
    fn add_bias(&mut self, x: &NodeId, bias: &NodeId) -> NodeId {
        Tape::add_bias(self, *x, *bias)
    }
    fn scale(&mut self, x: &NodeId, c: F) -> NodeId {
        Tape::scale(self, *x, c)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::matmul(self, *a, *b)
    }
    fn gelu(&mut self, x: &NodeId) -> NodeId {
        Tape::gelu(self, *x)
    }
    fn silu(&mut self, x: &NodeId) -> NodeId {
        Tape::silu(self, *x)
    }
    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        Tape::sigmoid(self, *x)
    }
    fn rms_norm(&mut self, x: &NodeId, gain: &NodeId, eps: F) -> NodeId {
        Tape::rms_norm(self, *x, *gain, eps)
    }
    fn gather_rows(&mut self, x: &NodeId, idx: &[usize]) -> NodeId {
        Tape::gather_rows(self, *x, idx)
    }
    fn merge_rows(&mut self, rows: usize, parts: &[(Vec<usize>, NodeId)]) -> NodeId {
        Tape::merge_rows(self, rows, parts)
    }
    fn slice_cols(&mut self, x: &NodeId, start: usize, len: usize) -> NodeId {
        Tape::slice_cols(self, *x, start, len)
    }
    fn concat_cols(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        Tape::concat_cols(self, *a, *b)
    }
    fn causal_conv1d(&mut self, x: &NodeId, w: &NodeId, bias: &NodeId, stride: usize) -> NodeId {
        Tape::causal_conv1d(self, *x, *w, *bias, stride)
    }
    fn upsample_rows(&mut self, x: &NodeId, factor: usize) -> NodeId {
        Tape::upsample_rows(self, *x, factor)
    }
    fn reshape(&mut self, x: &NodeId, shape: Vec<usize>) -> NodeId {
        Tape::reshape(self, *x, shape)
    }
    fn attention(&mut self, _layer: usize, q: &NodeId, k: &NodeId, v: &NodeId, heads: usize, rope_base: F) -> NodeId {
        Tape::attention(self, *q, *k, *v, heads, rope_base)
    }
    fn mean_all(&mut self, x: &NodeId) -> NodeId {
        Tape::mean_all(self, *x)
    }
    fn sum_all(&mut self, x: &NodeId) -> NodeId {
        Tape::sum_all(self, *x)
    }
    fn cross_entropy_mean(&mut self, logits: &NodeId, targets: &[usize]) -> NodeId {
        Tape::cross_entropy_mean(self, *logits, targets)
    }
    fn bce_logits_mean(&mut self, logits: &NodeId, labels: &[F]) -> NodeId {
        Tape::bce_logits_mean(self, *logits, labels)
    }
}

/// Per-layer attention key/value history for incremental decoding.
/// Keys are stored RoPE'd at their absolute positions; appends only.
pub struct KvCache<F> {
    pub k: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    width: usize,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(layers: usize, width: usize) -> Self {
        Self { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers], width, len: 0 }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.k.len()
    }

    /// Marks `n` new positions as fully processed. Called once per forward
    /// step, after every layer has appended its keys/values.
    pub fn advance(&mut self, n: usize) {
        self.len += n;
        for (lk, lv) in self.k.iter().zip(&self.v) {
            debug_assert_eq!(lk.len(), self.len * self.width, "cache advanced out of step");
            debug_assert_eq!(lv.len(), self.len * self.width);
        }
    }

    /// Consistency check: every layer holds exactly `len` positions.
    pub fn is_consistent(&self) -> bool {
        self.k.iter().zip(&self.v).all(|(lk, lv)| lk.len() == self.len * self.width && lv.len() == self.len * self.width)
    }
}

/// No-grad execution over plain tensors; attention goes through the KV cache
/// when one is attached.
pub struct InferCx<'s, F: Real> {
    store: &'s ParamStore<F>,
    cache: Option<&'s mut KvCache<F>>,
}

impl<'s, F: Real> InferCx<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, cache: None }
    }

    pub fn with_cache(store: &'s ParamStore<F>, cache: &'s mut KvCache<F>) -> Self {
        Self { store, cache: Some(cache) }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.as_ref().map(|c| c.len()).unwrap_or(0)
    }
}

impl<'s, F: Real> Cx<F> for InferCx<'s, F> {
    type T = Rc<Tensor<F>>;

    fn store(&self) -> &ParamStore<F> {
        self.store
    }
    fn param(&mut self, id: ParamId) -> Self::T {
        Rc::new(self.store.value(id).clone())
    }
    fn constant(&mut self, t: Tensor<F>) -> Self::T {
        Rc::new(t)
    }
    fn read(&self, t: &Self::T) -> Tensor<F> {
        (**t).clone()
    }
    fn shape_of(&self, t: &Self::T) -> Vec<usize> {
        t.shape.clone()
    }
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        assert_eq!(a.shape, b.shape, "add shape mismatch");
        Rc::new(Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect()))
    }
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        assert_eq!(a.shape, b.shape, "sub shape mismatch");
        Rc::new(Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect()))
    }
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        assert_eq!(a.shape, b.shape, "mul shape mismatch");
        Rc::new(Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect()))
    }
    fn add_bias(&mut self, x: &Self::T, bias: &Self::T) -> Self::T {
        let d = x.last_dim();
        assert_eq!(bias.shape, vec![d], "bias must be [last_dim]");
        let mut data = x.data.clone();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Rc::new(Tensor::new(x.shape.clone(), data))
    }
    fn scale(&mut self, x: &Self::T, c: F) -> Self::T {
        Rc::new(x.map(|v| v * c))
    }
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        Rc::new(kn::matmul(a, b))
    }
    fn gelu(&mut self, x: &Self::T) -> Self::T {
        Rc::new(x.map(kn::gelu))
    }
    fn silu(&mut self, x: &Self::T) -> Self::T {
        Rc::new(x.map(kn::silu))
    }
    fn sigmoid(&mut self, x: &Self::T) -> Self::T {
        Rc::new(x.map(kn::sigmoid))
    }
    fn rms_norm(&mut self, x: &Self::T, gain: &Self::T, eps: F) -> Self::T {
        Rc::new(kn::rms_norm(x, &gain.data, eps).0)
    }
    fn gather_rows(&mut self, x: &Self::T, idx: &[usize]) -> Self::T {
        let d = x.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(x.row(r));
        }
        Rc::new(Tensor::new(vec![idx.len(), d], data))
    }
    fn merge_rows(&mut self, rows: usize, parts: &[(Vec<usize>, Self::T)]) -> Self::T {
        let d = parts
            .iter()
            .find(|(idx, _)| !idx.is_empty())
            .map(|(_, t)| t.last_dim())
            .expect("merge_rows needs at least one non-empty part");
        let mut data = vec![F::zero(); rows * d];
        for (idx, t) in parts {
            for (r, &dst) in idx.iter().enumerate() {
                data[dst * d..(dst + 1) * d].copy_from_slice(t.row(r));
            }
        }
        Rc::new(Tensor::new(vec![rows, d], data))
    }
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Self::T {
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Rc::new(Tensor::new(vec![rows, len], data))
    }
    fn concat_cols(&mut self, a: &Self::T, b: &Self::T) -> Self::T {
        let rows = a.rows();
        assert_eq!(rows, b.rows(), "concat_cols row mismatch");
        let (ca, cb) = (a.last_dim(), b.last_dim());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Rc::new(Tensor::new(vec![rows, ca + cb], data))
    }
    fn causal_conv1d(&mut self, x: &Self::T, w: &Self::T, bias: &Self::T, stride: usize) -> Self::T {
        Rc::new(kn::causal_conv1d(x, w, &bias.data, stride))
    }
    fn upsample_rows(&mut self, x: &Self::T, factor: usize) -> Self::T {
        Rc::new(kn::upsample_rows(x, factor))
    }
    fn reshape(&mut self, x: &Self::T, shape: Vec<usize>) -> Self::T {
        assert_eq!(x.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        Rc::new(Tensor::new(shape, x.data.clone()))
    }
    fn attention(&mut self, layer: usize, q: &Self::T, k: &Self::T, v: &Self::T, heads: usize, rope_base: F) -> Self::T {
        match self.cache.as_deref_mut() {
            Some(cache) => {
                let off = cache.len();
                let width = cache.width();
                assert_eq!(q.shape[1], width, "attention width/cache mismatch");
                let out = kn::causal_attention_cached(
                    q,
                    k,
                    v,
                    heads,
                    rope_base,
                    &mut cache.k[layer],
                    &mut cache.v[layer],
                    off,
                );
                Rc::new(out)
            }
            None => Rc::new(kn::causal_attention(q, k, v, heads, rope_base).0),
        }
    }
    fn mean_all(&mut self, x: &Self::T) -> Self::T {
        let n = F::fl(x.numel() as f64);
        let s = x.data.iter().copied().sum::<F>() / n;
        Rc::new(Tensor::scalar(s))
    }
    fn sum_all(&mut self, x: &Self::T) -> Self::T {
        Rc::new(Tensor::scalar(x.data.iter().copied().sum::<F>()))
    }
    fn cross_entropy_mean(&mut self, logits: &Self::T, targets: &[usize]) -> Self::T {
        let v = logits.last_dim();
        assert_eq!(logits.rows(), targets.len(), "cross_entropy target count mismatch");
        let mut probs = (**logits).clone();
        kn::softmax_rows_inplace(&mut probs.data, v);
        let mut loss = F::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            loss = loss - probs.data[r * v + tgt].max(F::fl(1e-30)).ln();
        }
        Rc::new(Tensor::scalar(loss / F::fl(targets.len() as f64)))
    }
    fn bce_logits_mean(&mut self, logits: &Self::T, labels: &[F]) -> Self::T {
        assert_eq!(logits.numel(), labels.len(), "bce label count mismatch");
        let mut loss = F::zero();
        for (&l, &y) in logits.data.iter().zip(labels) {
            loss = loss + l.max(F::zero()) - l * y + (F::one() + (-l.abs()).exp()).ln();
        }
        Rc::new(Tensor::scalar(loss / F::fl(labels.len() as f64)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Incremental cached attention must reproduce the full-sequence pass.
    #[test]
    fn kv_cache_incremental_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = 8;
        let width = 32;
        let heads = 4;
        let q: Tensor<f32> = Tensor::randn(vec![s, width], 1.0, &mut rng);
        let k: Tensor<f32> = Tensor::randn(vec![s, width], 1.0, &mut rng);
        let v: Tensor<f32> = Tensor::randn(vec![s, width], 1.0, &mut rng);
        let (full, _, _, _) = kn::causal_attention(&q, &k, &v, heads, 10000.0);

        let mut kc = Vec::new();
        let mut vc = Vec::new();
        let mut inc = Vec::new();
        for i in 0..s {
            let qi = Tensor::new(vec![1, width], q.row(i).to_vec());
            let ki = Tensor::new(vec![1, width], k.row(i).to_vec());
            let vi = Tensor::new(vec![1, width], v.row(i).to_vec());
            let o = kn::causal_attention_cached(&qi, &ki, &vi, heads, 10000.0, &mut kc, &mut vc, i);
            inc.extend_from_slice(&o.data);
        }
        let inc = Tensor::new(vec![s, width], inc);
        assert!(full.max_abs_diff(&inc) <= 1e-4, "diff {}", full.max_abs_diff(&inc));
    }
}
