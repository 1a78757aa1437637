//! Decoder-only transformer with per-modality parameter routing.
//!
//! Every block holds two complete parameter sets (text / motion). Tokens are
//! normalized and projected by their own modality's weights, attention runs
//! once over the jointly assembled q/k/v (one softmax over the whole
//! sequence), and the output projection, second norm, and gated FFN are
//! routed again. The text branch — embeddings, blocks, LM head — is frozen
//! during unified training; only the `[BOM]`/`[EOM]` embedding rows stay
//! trainable, held in a separate overlay tensor.

use crate::error::{Error, Result};
use crate::heads::Adapter;
use crate::num::{Cx, InferCx, KvCache, Linear, ParamStore, Real, RmsNorm, Tensor};
use crate::tokenizer::{BOM, EOM};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 4, dim: 256, heads: 8, ffn_dim: 512, vocab: 2048, rope_base: 10000.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.dim / self.heads).is_multiple_of(2) {
            return Err(Error::Shape("head dim must be even for rotary embedding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Motion,
}

/// One element of an interleaved sequence: a text token id or a motion
/// latent vector.
#[derive(Debug, Clone)]
pub enum Item {
    Text(u32),
    Motion(Vec<f32>),
}

impl Item {
    pub fn modality(&self) -> Modality {
        match self {
            Item::Text(_) => Modality::Text,
            Item::Motion(_) => Modality::Motion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    TextToMotion,
    MotionToText,
}

/// Modality-tagged stream plus the loss masks the trainer consumes.
#[derive(Debug, Clone)]
pub struct InterleavedSequence {
    pub items: Vec<Item>,
    pub task: Task,
    /// `(position, clean target latent)`: the hidden state at `position`
    /// conditions the flow head whose target is the next latent.
    pub flow_targets: Vec<(usize, Vec<f32>)>,
    /// `(position, next token id)` pairs for the NTP loss.
    pub ntp_targets: Vec<(usize, u32)>,
    /// `(position, label)` aligned with `flow_targets`; 1 marks the position
    /// producing the final latent of the motion span.
    pub exit_labels: Vec<(usize, f32)>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut text = Vec::new();
        let mut motion = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            match item.modality() {
                Modality::Text => text.push(i),
                Modality::Motion => motion.push(i),
            }
        }
        (text, motion)
    }
}

/// Parameter handles for one branch of one block.
#[derive(Debug, Clone, Copy)]
pub struct BranchBlock {
    pub norm_attn: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_ffn: RmsNorm,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

impl BranchBlock {
    fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        let std = 0.02;
        // residual-output projections scaled down with depth
        let out_std = std / (2.0 * cfg.layers as f64).sqrt();
        Self {
            norm_attn: RmsNorm::init(store, &format!("{prefix}.norm_attn"), d),
            wq: Linear::init(store, &format!("{prefix}.wq"), d, d, std, false, rng),
            wk: Linear::init(store, &format!("{prefix}.wk"), d, d, std, false, rng),
            wv: Linear::init(store, &format!("{prefix}.wv"), d, d, std, false, rng),
            wo: Linear::init(store, &format!("{prefix}.wo"), d, d, out_std, false, rng),
            norm_ffn: RmsNorm::init(store, &format!("{prefix}.norm_ffn"), d),
            w_gate: Linear::init(store, &format!("{prefix}.w_gate"), d, f, std, false, rng),
            w_up: Linear::init(store, &format!("{prefix}.w_up"), d, f, std, false, rng),
            w_down: Linear::init(store, &format!("{prefix}.w_down"), f, d, out_std, false, rng),
        }
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        ["norm_attn.gain", "wq.w", "wk.w", "wv.w", "wo.w", "norm_ffn.gain", "w_gate.w", "w_up.w", "w_down.w"]
            .iter()
            .map(|s| format!("{prefix}.{s}"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub text: BranchBlock,
    pub motion: BranchBlock,
}

/// The routed transformer: frozen text branch, trainable motion branch,
/// shared attention.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ModelConfig,
    /// `[V, d]` token embedding table (text-owned, frozen with the branch).
    pub embed: crate::num::ParamId,
    /// `[2, d]` trainable rows standing in for the `[BOM]`/`[EOM]` entries.
    pub special_embed: crate::num::ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm_text: RmsNorm,
    pub final_norm_motion: RmsNorm,
    /// `[d, V]` LM head, untied from the embedding, frozen with the branch.
    pub lm_head: Linear,
}

impl Backbone {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = store.add("text.embed", Tensor::randn(vec![cfg.vocab, cfg.dim], 0.02, rng));
        let special_embed = store.add("special.bom_eom", Tensor::zeros(vec![2, cfg.dim]));
        let blocks = (0..cfg.layers)
            .map(|l| BlockParams {
                text: BranchBlock::init(store, &format!("text.block{l}"), &cfg, rng),
                motion: BranchBlock::init(store, &format!("motion.block{l}"), &cfg, rng),
            })
            .collect();
        let final_norm_text = RmsNorm::init(store, "text.final_norm", cfg.dim);
        let final_norm_motion = RmsNorm::init(store, "motion.final_norm", cfg.dim);
        let lm_head = Linear::init(store, "text.lm_head", cfg.dim, cfg.vocab, 0.02, false, rng);
        Ok(Self { cfg, embed, special_embed, blocks, final_norm_text, final_norm_motion, lm_head })
    }

    /// Copies every text-branch block tensor into the motion branch, so both
    /// branches start as the same function.
    pub fn copy_text_branch_to_motion<F: Real>(&self, store: &mut ParamStore<F>) {
        for (l, bp) in self.blocks.iter().enumerate() {
            let from = bp.text.param_names(&format!("text.block{l}"));
            let to = bp.motion.param_names(&format!("motion.block{l}"));
            for (f, t) in from.iter().zip(&to) {
                let v = store.value(store.id(f).expect("text param")).clone();
                *store.value_mut(store.id(t).expect("motion param")) = v;
            }
        }
        let v = store.value(self.final_norm_text.gain).clone();
        *store.value_mut(self.final_norm_motion.gain) = v;
    }

    /// Sets the `[BOM]`/`[EOM]` overlay rows to the column mean of the token
    /// embedding table.
    pub fn init_special_rows_from_embedding_mean<F: Real>(&self, store: &mut ParamStore<F>) {
        let table = store.value(self.embed);
        let (v, d) = (table.shape[0], table.shape[1]);
        let mut mean = vec![F::zero(); d];
        for r in 0..v {
            for (m, &x) in mean.iter_mut().zip(table.row(r)) {
                *m = *m + x;
            }
        }
        let inv = F::one() / F::fl(v as f64);
        for m in &mut mean {
            *m = *m * inv;
        }
        let mut rows = mean.clone();
        rows.extend_from_slice(&mean);
        *store.value_mut(self.special_embed) = Tensor::new(vec![2, d], rows);
    }

    /// Marks the whole text branch (blocks, embedding table, LM head, final
    /// norm) as frozen; the `[BOM]`/`[EOM]` overlay stays trainable.
    pub fn freeze_text<F: Real>(&self, store: &mut ParamStore<F>) {
        store.set_frozen(is_text_param);
    }

    /// Embeds an interleaved sequence: regular text ids through the (frozen)
    /// table, `[BOM]`/`[EOM]` through the trainable overlay, motion latents
    /// through the adapter.
    pub fn embed_items<F: Real, C: Cx<F>>(&self, cx: &mut C, items: &[Item], adapter: &Adapter) -> Result<C::T> {
        let s = items.len();
        if s == 0 {
            return Err(Error::EmptyInput("cannot embed an empty sequence".into()));
        }
        let mut table_pos = Vec::new();
        let mut table_ids = Vec::new();
        let mut special_pos = Vec::new();
        let mut special_rows = Vec::new();
        let mut motion_pos = Vec::new();
        let mut motion_rows: Vec<f32> = Vec::new();
        let mut z_dim = 0usize;
        for (i, item) in items.iter().enumerate() {
            match item {
                Item::Text(id) => {
                    if *id as usize >= self.cfg.vocab {
                        return Err(Error::OutOfVocab(*id));
                    }
                    if *id == BOM || *id == EOM {
                        special_pos.push(i);
                        special_rows.push(if *id == BOM { 0 } else { 1 });
                    } else {
                        table_pos.push(i);
                        table_ids.push(*id as usize);
                    }
                }
                Item::Motion(z) => {
                    z_dim = z.len();
                    motion_pos.push(i);
                    motion_rows.extend_from_slice(z);
                }
            }
        }
        let mut parts: Vec<(Vec<usize>, C::T)> = Vec::new();
        if !table_pos.is_empty() {
            let table = cx.param(self.embed);
            let rows = cx.gather_rows(&table, &table_ids);
            parts.push((table_pos, rows));
        }
        if !special_pos.is_empty() {
            let table = cx.param(self.special_embed);
            let rows = cx.gather_rows(&table, &special_rows);
            parts.push((special_pos, rows));
        }
        if !motion_pos.is_empty() {
            let z = Tensor::from_f32(&Tensor::new(vec![motion_pos.len(), z_dim], motion_rows));
            let zc = cx.constant(z);
            let rows = adapter.forward(cx, &zc);
            parts.push((motion_pos, rows));
        }
        if parts.len() == 1 {
            // already covers every row in order when there's a single part
            let (idx, t) = &parts[0];
            if idx.windows(2).all(|w| w[1] == w[0] + 1) {
                return Ok(t.clone());
            }
        }
        Ok(cx.merge_rows(s, &parts))
    }

    fn branch_ffn<F: Real, C: Cx<F>>(&self, cx: &mut C, x: &C::T, b: &BranchBlock) -> C::T {
        let g = b.w_gate.forward(cx, x);
        let g = cx.silu(&g);
        let u = b.w_up.forward(cx, x);
        let gu = cx.mul(&g, &u);
        b.w_down.forward(cx, &gu)
    }

    fn block_single<F: Real, C: Cx<F>>(&self, cx: &mut C, h: &C::T, b: &BranchBlock, layer: usize) -> C::T {
        let x = b.norm_attn.forward(cx, h);
        let q = b.wq.forward(cx, &x);
        let k = b.wk.forward(cx, &x);
        let v = b.wv.forward(cx, &x);
        let attn = cx.attention(layer, &q, &k, &v, self.cfg.heads, F::fl(self.cfg.rope_base));
        let o = b.wo.forward(cx, &attn);
        let mid = cx.add(h, &o);
        let y = b.norm_ffn.forward(cx, &mid);
        let f = self.branch_ffn(cx, &y, b);
        cx.add(&mid, &f)
    }

    fn block_mixed<F: Real, C: Cx<F>>(
        &self,
        cx: &mut C,
        h: &C::T,
        bp: &BlockParams,
        layer: usize,
        text_idx: &[usize],
        motion_idx: &[usize],
    ) -> C::T {
        let s = text_idx.len() + motion_idx.len();
        let ht = cx.gather_rows(h, text_idx);
        let hm = cx.gather_rows(h, motion_idx);
        let xt = bp.text.norm_attn.forward(cx, &ht);
        let xm = bp.motion.norm_attn.forward(cx, &hm);
        let routed = |cx: &mut C, ft: &dyn Fn(&mut C) -> C::T, fm: &dyn Fn(&mut C) -> C::T| {
            let pt = ft(cx);
            let pm = fm(cx);
            cx.merge_rows(s, &[(text_idx.to_vec(), pt), (motion_idx.to_vec(), pm)])
        };
        let q = routed(cx, &|c| bp.text.wq.forward(c, &xt), &|c| bp.motion.wq.forward(c, &xm));
        let k = routed(cx, &|c| bp.text.wk.forward(c, &xt), &|c| bp.motion.wk.forward(c, &xm));
        let v = routed(cx, &|c| bp.text.wv.forward(c, &xt), &|c| bp.motion.wv.forward(c, &xm));
        let attn = cx.attention(layer, &q, &k, &v, self.cfg.heads, F::fl(self.cfg.rope_base));
        let at = cx.gather_rows(&attn, text_idx);
        let am = cx.gather_rows(&attn, motion_idx);
        let o = routed(cx, &|c| bp.text.wo.forward(c, &at), &|c| bp.motion.wo.forward(c, &am));
        let mid = cx.add(h, &o);
        let mt = cx.gather_rows(&mid, text_idx);
        let mm = cx.gather_rows(&mid, motion_idx);
        let yt = bp.text.norm_ffn.forward(cx, &mt);
        let ym = bp.motion.norm_ffn.forward(cx, &mm);
        let f = routed(
            cx,
            &|c| self.branch_ffn(c, &yt, &bp.text),
            &|c| self.branch_ffn(c, &ym, &bp.motion),
        );
        cx.add(&mid, &f)
    }

    /// One routed block: pre-norm, per-modality QKV, shared causal
    /// attention, per-modality output projection, residual, per-modality
    /// norm + FFN, residual.
    pub fn block<F: Real, C: Cx<F>>(
        &self,
        cx: &mut C,
        h: &C::T,
        layer: usize,
        text_idx: &[usize],
        motion_idx: &[usize],
    ) -> C::T {
        let bp = &self.blocks[layer];
        if motion_idx.is_empty() {
            self.block_single(cx, h, &bp.text, layer)
        } else if text_idx.is_empty() {
            self.block_single(cx, h, &bp.motion, layer)
        } else {
            self.block_mixed(cx, h, bp, layer, text_idx, motion_idx)
        }
    }

    /// Full forward: embeddings, `L` routed blocks, final per-modality norm.
    /// Returns hidden states `[S, d]`.
    pub fn forward<F: Real, C: Cx<F>>(&self, cx: &mut C, items: &[Item], adapter: &Adapter) -> Result<C::T> {
        let (text_idx, motion_idx): (Vec<usize>, Vec<usize>) = {
            let mut t = Vec::new();
            let mut m = Vec::new();
            for (i, item) in items.iter().enumerate() {
                match item.modality() {
                    Modality::Text => t.push(i),
                    Modality::Motion => m.push(i),
                }
            }
            (t, m)
        };
        let mut h = self.embed_items(cx, items, adapter)?;
        for layer in 0..self.cfg.layers {
            h = self.block(cx, &h, layer, &text_idx, &motion_idx);
        }
        // final per-modality norm
        if motion_idx.is_empty() {
            Ok(self.final_norm_text.forward(cx, &h))
        } else if text_idx.is_empty() {
            Ok(self.final_norm_motion.forward(cx, &h))
        } else {
            let ht = cx.gather_rows(&h, &text_idx);
            let hm = cx.gather_rows(&h, &motion_idx);
            let nt = self.final_norm_text.forward(cx, &ht);
            let nm = self.final_norm_motion.forward(cx, &hm);
            Ok(cx.merge_rows(items.len(), &[(text_idx, nt), (motion_idx, nm)]))
        }
    }

    /// Incremental forward over the KV cache: processes only `new_items`,
    /// returns their hidden states. The cache advances past them.
    pub fn forward_cached<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &mut KvCache<F>,
        new_items: &[Item],
        adapter: &Adapter,
    ) -> Result<Tensor<F>> {
        if cache.layers() != self.cfg.layers || cache.width() != self.cfg.dim {
            return Err(Error::CacheMismatch(format!(
                "cache {}x{} vs model {}x{}",
                cache.layers(),
                cache.width(),
                self.cfg.layers,
                self.cfg.dim
            )));
        }
        if !cache.is_consistent() {
            return Err(Error::CacheMismatch("layer lengths disagree with position counter".into()));
        }
        let n = new_items.len();
        let mut cx = InferCx::with_cache(store, cache);
        let out = self.forward(&mut cx, new_items, adapter)?;
        let t = cx.read(&out);
        cache.advance(n);
        Ok(t)
    }

    pub fn new_cache<F: Real>(&self) -> KvCache<F> {
        KvCache::new(self.cfg.layers, self.cfg.dim)
    }

    /// LM logits for given rows of hidden state.
    pub fn lm_logits<F: Real, C: Cx<F>>(&self, cx: &mut C, hidden_rows: &C::T) -> C::T {
        self.lm_head.forward(cx, hidden_rows)
    }
}

/// Text-branch predicate: matches the embedding table, every text block, the
/// final text norm, and the LM head.
pub fn is_text_param(name: &str) -> bool {
    name.starts_with("text.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Adapter;
    use crate::num::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { layers: 2, dim: 32, heads: 4, ffn_dim: 64, vocab: 64, rope_base: 10000.0 }
    }

    fn setup() -> (ParamStore<f32>, Backbone, Adapter) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, small_cfg(), &mut rng).unwrap();
        let adapter = Adapter::init(&mut store, 8, 32, &mut rng);
        (store, bb, adapter)
    }

    fn mixed_items(seed: u64) -> Vec<Item> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = vec![Item::Text(crate::tokenizer::BOS)];
        for _ in 0..3 {
            items.push(Item::Text(rng.random_range(5..60)));
        }
        items.push(Item::Text(BOM));
        for _ in 0..4 {
            items.push(Item::Motion((0..8).map(|_| rng.random_range(-1.0..1.0f32)).collect()));
        }
        items.push(Item::Text(EOM));
        items
    }

    #[test]
    fn all_text_embedding_equals_table_lookup() {
        let (store, bb, adapter) = setup();
        let items: Vec<Item> = vec![Item::Text(7), Item::Text(12), Item::Text(BOM)];
        let mut tape = Tape::new(&store);
        let e = bb.embed_items(&mut tape, &items, &adapter).unwrap();
        let got = tape.value(e).clone();
        let table = store.value(bb.embed);
        let spec = store.value(bb.special_embed);
        // plain ids are bit-equal to the table lookup
        assert_eq!(got.row(0), table.row(7));
        assert_eq!(got.row(1), table.row(12));
        // [BOM] resolves to the trainable overlay row, not the frozen table
        assert_eq!(got.row(2), spec.row(0));
    }

    #[test]
    fn special_rows_initialize_to_embedding_column_mean() {
        let (mut store, bb, _) = setup();
        bb.init_special_rows_from_embedding_mean(&mut store);
        let table = store.value(bb.embed).clone();
        let spec = store.value(bb.special_embed);
        for c in 0..32 {
            let mean: f32 = (0..64).map(|r| table.row(r)[c]).sum::<f32>() / 64.0;
            assert!((spec.row(0)[c] - mean).abs() < 1e-6);
            assert_eq!(spec.row(0)[c], spec.row(1)[c]);
        }
    }

    #[test]
    fn out_of_vocab_id_errors() {
        let (store, bb, adapter) = setup();
        let mut tape = Tape::new(&store);
        let err = bb.embed_items(&mut tape, &[Item::Text(64)], &adapter).unwrap_err();
        assert!(matches!(err, Error::OutOfVocab(64)));
    }

    /// With the motion branch bit-copied from the text branch, relabeling
    /// modalities must not change the output.
    #[test]
    fn cloned_branches_make_output_mask_independent() {
        let (mut store, bb, adapter) = setup();
        bb.copy_text_branch_to_motion(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zs: Vec<Vec<f32>> = (0..5).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0f32)).collect()).collect();
        // run the same raw vectors once as "motion" items and once as if they
        // were text rows: emulate by feeding them through block() directly
        let h = Tensor::new(vec![5, 32], zs.concat());
        let run = |text_idx: Vec<usize>, motion_idx: Vec<usize>| {
            let mut tape = Tape::new(&store);
            let hn = tape.constant(Tensor::from_f32(&h));
            let out = bb.block(&mut tape, &hn, 0, &text_idx, &motion_idx);
            tape.value(out).clone()
        };
        let all_text = run((0..5).collect(), vec![]);
        let all_motion = run(vec![], (0..5).collect());
        let mixed = run(vec![0, 2, 4], vec![1, 3]);
        assert_eq!(all_text.data, all_motion.data);
        assert_eq!(all_text.data, mixed.data);
        let _ = adapter;
    }

    /// Routing isolation: perturbing the motion FFN cannot touch all-text rows.
    #[test]
    fn motion_perturbation_leaves_text_rows_bit_identical() {
        let (mut store, bb, adapter) = setup();
        let items: Vec<Item> = vec![Item::Text(1), Item::Text(9), Item::Text(30)];
        let run = |store: &ParamStore<f32>| {
            let mut tape = Tape::new(store);
            let out = bb.forward(&mut tape, &items, &adapter).unwrap();
            tape.value(out).clone()
        };
        let before = run(&store);
        let wid = store.id("motion.block0.w_gate.w").unwrap();
        for v in &mut store.value_mut(wid).data {
            *v += 7.5;
        }
        let after = run(&store);
        assert_eq!(before.data, after.data);
    }

    /// Mixed-sequence block output equals a reference that materializes both
    /// full branches and selects rows.
    #[test]
    fn mixed_block_matches_materialized_reference() {
        let (mut store, bb, _) = setup();
        // make branches differ
        let wid = store.id("motion.block0.wq.w").unwrap();
        for v in &mut store.value_mut(wid).data {
            *v *= -1.3;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Tensor<f32> = Tensor::randn(vec![6, 32], 1.0, &mut rng);
        let text_idx = vec![0usize, 3, 4];
        let motion_idx = vec![1usize, 2, 5];
        let mixed = {
            let mut tape = Tape::new(&store);
            let hn = tape.constant(h.clone());
            let out = bb.block(&mut tape, &hn, 0, &text_idx, &motion_idx);
            tape.value(out).clone()
        };
        // reference: both branches over the full sequence, then row select.
        // the shared attention still sees the routed q/k/v, so the reference
        // reuses the mixed q/k/v assembly but materializes both FFN paths.
        let reference = {
            let bp = &bb.blocks[0];
            let mut tape = Tape::new(&store);
            let hn = tape.constant(h.clone());
            let xt = bp.text.norm_attn.forward(&mut tape, &hn);
            let xm = bp.motion.norm_attn.forward(&mut tape, &hn);
            let pick = |tape: &mut Tape<f32>, a: crate::num::NodeId, b: crate::num::NodeId| {
                let at = tape.gather_rows(a, &text_idx);
                let bm = tape.gather_rows(b, &motion_idx);
                tape.merge_rows(6, &[(text_idx.clone(), at), (motion_idx.clone(), bm)])
            };
            let qt = bp.text.wq.forward(&mut tape, &xt);
            let qm = bp.motion.wq.forward(&mut tape, &xm);
            let q = pick(&mut tape, qt, qm);
            let kt = bp.text.wk.forward(&mut tape, &xt);
            let km = bp.motion.wk.forward(&mut tape, &xm);
            let k = pick(&mut tape, kt, km);
            let vt = bp.text.wv.forward(&mut tape, &xt);
            let vm = bp.motion.wv.forward(&mut tape, &xm);
            let v = pick(&mut tape, vt, vm);
            let attn = tape.attention(q, k, v, bb.cfg.heads, 10000.0);
            let ot = bp.text.wo.forward(&mut tape, &attn);
            let om = bp.motion.wo.forward(&mut tape, &attn);
            let o = pick(&mut tape, ot, om);
            let mid = tape.add(hn, o);
            let yt = bp.text.norm_ffn.forward(&mut tape, &mid);
            let ym = bp.motion.norm_ffn.forward(&mut tape, &mid);
            let ft = bb.branch_ffn(&mut tape, &yt, &bp.text);
            let fm = bb.branch_ffn(&mut tape, &ym, &bp.motion);
            let f = pick(&mut tape, ft, fm);
            let out = tape.add(mid, f);
            tape.value(out).clone()
        };
        assert!(mixed.max_abs_diff(&reference) <= 1e-6);
    }

    #[test]
    fn cached_incremental_forward_matches_full() {
        let (store, bb, adapter) = setup();
        let items = mixed_items(3);
        let full = {
            let mut cx = InferCx::new(&store);
            let out = bb.forward(&mut cx, &items, &adapter).unwrap();
            cx.read(&out)
        };
        let mut cache = bb.new_cache::<f32>();
        let mut rows: Vec<f32> = Vec::new();
        for item in &items {
            let h = bb.forward_cached(&store, &mut cache, std::slice::from_ref(item), &adapter).unwrap();
            rows.extend_from_slice(&h.data);
        }
        let inc = Tensor::new(vec![items.len(), bb.cfg.dim], rows);
        assert!(full.max_abs_diff(&inc) <= 1e-4, "diff {}", full.max_abs_diff(&inc));
    }

    #[test]
    fn taped_forward_equals_infer_forward_bitwise() {
        let (store, bb, adapter) = setup();
        let items = mixed_items(8);
        let taped = {
            let mut tape = Tape::new(&store);
            let out = bb.forward(&mut tape, &items, &adapter).unwrap();
            tape.value(out).clone()
        };
        let plain = {
            let mut cx = InferCx::new(&store);
            let out = bb.forward(&mut cx, &items, &adapter).unwrap();
            cx.read(&out)
        };
        assert_eq!(taped.data, plain.data);
    }

    #[test]
    fn future_items_cannot_change_past_hidden_states() {
        let (store, bb, adapter) = setup();
        let mut items = mixed_items(5);
        let run = |items: &[Item]| {
            let mut cx = InferCx::new(&store);
            let out = bb.forward(&mut cx, items, &adapter).unwrap();
            cx.read(&out)
        };
        let base = run(&items);
        let last = items.len() - 1;
        items[last] = Item::Text(42);
        let pert = run(&items);
        for p in 0..last {
            assert_eq!(base.row(p), pert.row(p), "position {p}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (store, bb, adapter) = setup();
        let mut cache: KvCache<f32> = KvCache::new(1, 32); // wrong layer count
        let err = bb.forward_cached(&store, &mut cache, &[Item::Text(1)], &adapter).unwrap_err();
        assert!(matches!(err, Error::CacheMismatch(_)));
    }

    /// NTP loss identities: saturated-correct logits drive the loss to zero
    /// and the batched mean equals a per-position scalar loop.
    #[test]
    fn ntp_loss_matches_per_position_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let store: ParamStore<f32> = ParamStore::new();
        let v = 11usize;
        let logits: Tensor<f32> = Tensor::randn(vec![5, v], 2.0, &mut rng);
        let targets = [3usize, 0, 10, 7, 3];
        let batch = {
            let mut tape = Tape::new(&store);
            let l = tape.constant(logits.clone());
            let ce = tape.cross_entropy_mean(l, &targets);
            tape.value(ce).scalar_value() as f64
        };
        let mut acc = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = mx + row.iter().map(|&x| ((x as f64) - mx).exp()).sum::<f64>().ln();
            acc += lse - row[t] as f64;
        }
        assert!((batch - acc / 5.0).abs() <= 1e-6, "{batch} vs {}", acc / 5.0);
        // one-hot with a huge margin
        let mut hot = Tensor::full(vec![2, v], -40.0f32);
        hot.data[2] = 40.0;
        hot.data[v + 5] = 40.0;
        let mut tape = Tape::new(&store);
        let l = tape.constant(hot);
        let ce = tape.cross_entropy_mean(l, &[2, 5]);
        assert!(tape.value(ce).scalar_value() < 1e-6);
    }

    /// Total parameters are about twice one branch; per-token activation uses
    /// exactly one branch.
    #[test]
    fn parameter_accounting_matches_routing_claim() {
        let (store, _, _) = setup();
        let text_block = store.num_scalars_matching(|n| n.starts_with("text.block"));
        let motion_block = store.num_scalars_matching(|n| n.starts_with("motion.block"));
        assert_eq!(text_block, motion_block);
        let text_norm = store.num_scalars_matching(|n| n == "text.final_norm.gain");
        let motion_norm = store.num_scalars_matching(|n| n == "motion.final_norm.gain");
        assert_eq!(text_norm, motion_norm);
    }
}
