//! Causal continuous motion VAE.
//!
//! The encoder is a stack of left-padded convolutions (two stride-2 stages
//! for the default 4x temporal downsampling) producing per-step latent means.
//! Instead of predicting a variance, sampling draws sigma uniformly from
//! `[0, C_sigma]` per latent vector, which keeps the decoder robust to the
//! imperfect latents an autoregressive head produces. The decoder mirrors the
//! encoder with nearest-neighbor upsampling and decodes in streaming fashion:
//! one latent in, `l` frames out, bit-identical to the batch path.
//!
//! Upsampling is learned depth-to-time: a causal convolution emits `2c`
//! channels per step which unfold into two frames, so every output phase of
//! an `l`-frame block gets its own filters (plain nearest-neighbor repeat
//! plus a short conv cannot reconstruct limb velocities near the latent
//! Nyquist rate and leaves 7.5 Hz block jitter).
//!
//! Features are standardized per dimension with corpus statistics stored
//! alongside the weights; all losses act in the normalized space.

use crate::error::{Error, Result};
use crate::num::{AdamW, Cx, Gradients, InferCx, ParamId, ParamStore, Real, Tape, Tensor};
use crate::repr::MotionSequence;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub z_dim: usize,
    pub downsample: usize,
    pub width: usize,
    pub kernel: usize,
    pub c_sigma: f32,
    pub kl_weight: f32,
    pub lambda_root: f32,
    pub frame_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            z_dim: 32,
            downsample: 4,
            width: 96,
            kernel: 3,
            c_sigma: 0.01,
            kl_weight: 1e-4,
            lambda_root: 1.0,
            frame_dim: 272,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Shape(format!("downsample {} must be a power of two >= 2", self.downsample)));
        }
        if self.c_sigma < 0.0 {
            return Err(Error::Shape("c_sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn stride2_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    silu: bool,
    /// Depth-to-time expansion applied after the conv (1 = none): the
    /// `expand * c` output channels unfold into `expand` frames.
    expand: usize,
}

/// Encoder/decoder parameter handles plus the feature statistics. The
/// decoder trunk feeds two output heads: a dedicated branch for the 8 root
/// features (whose per-frame errors integrate into global drift) and the
/// main projection for the remaining features.
#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    enc: Vec<ConvLayer>,
    dec_trunk: Vec<ConvLayer>,
    dec_root: Vec<ConvLayer>,
    dec_main: ConvLayer,
    pub stats_mean: ParamId,
    pub stats_std: ParamId,
}

const ROOT_FEATURES: usize = 8;

impl Codec {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let w = cfg.width;
        let d = cfg.frame_dim;
        let mut enc = Vec::new();
        let mut dims = vec![(d, w, 1usize)];
        for _ in 0..cfg.stride2_stages() {
            dims.push((w, w, 2));
        }
        dims.push((w, cfg.z_dim, 1));
        let n_enc = dims.len();
        for (i, &(ci, co, s)) in dims.iter().enumerate() {
            let std = (2.0 / (k * ci) as f64).sqrt();
            enc.push(ConvLayer {
                w: store.add(format!("codec.enc{i}.w"), Tensor::randn(vec![k, ci, co], std, rng)),
                b: store.add(format!("codec.enc{i}.b"), Tensor::zeros(vec![co])),
                stride: s,
                silu: i + 1 < n_enc,
                expand: 1,
            });
        }
        let mut conv = |store: &mut ParamStore<F>, name: String, ci: usize, co: usize, expand: usize, silu: bool, rng: &mut R| {
            let std = (2.0 / (k * ci) as f64).sqrt();
            ConvLayer {
                w: store.add(format!("{name}.w"), Tensor::randn(vec![k, ci, co * expand], std, rng)),
                b: store.add(format!("{name}.b"), Tensor::zeros(vec![co * expand])),
                stride: 1,
                silu,
                expand,
            }
        };
        // trunk: (c_in, c_out, expand); expand-2 layers emit 2*c_out channels
        // that unfold into two frames
        let mut ddims = vec![(cfg.z_dim, w, 1usize)];
        for _ in 0..cfg.stride2_stages() {
            ddims.push((w, w, 2));
        }
        ddims.push((w, w, 1)); // full-rate refinement
        let dec_trunk = ddims
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, expand))| conv(store, format!("codec.dec{i}"), ci, co, expand, true, rng))
            .collect();
        let root_mid = (w / 2).max(ROOT_FEATURES);
        let dec_root = vec![
            conv(store, "codec.root0".into(), w, root_mid, 1, true, rng),
            conv(store, "codec.root1".into(), root_mid, ROOT_FEATURES, 1, false, rng),
        ];
        let dec_main = conv(store, "codec.main".into(), w, d - ROOT_FEATURES, 1, false, rng);
        let stats_mean = store.add("codec.stats.mean", Tensor::zeros(vec![d]));
        let stats_std = store.add("codec.stats.std", Tensor::full(vec![d], F::one()));
        Ok(Self { cfg, enc, dec_trunk, dec_root, dec_main, stats_mean, stats_std })
    }

    /// Computes per-feature mean/std over the given sequences and stores them.
    pub fn fit_stats<F: Real>(&self, store: &mut ParamStore<F>, seqs: &[&MotionSequence]) {
        let d = self.cfg.frame_dim;
        let mut mean = vec![0.0f64; d];
        let mut count = 0usize;
        for s in seqs {
            for f in 0..s.frames() {
                for (m, &v) in mean.iter_mut().zip(s.frame(f)) {
                    *m += v as f64;
                }
                count += 1;
            }
        }
        for m in &mut mean {
            *m /= count.max(1) as f64;
        }
        let mut var = vec![0.0f64; d];
        for s in seqs {
            for f in 0..s.frames() {
                for (v, (&x, &m)) in var.iter_mut().zip(s.frame(f).iter().zip(&mean)) {
                    let c = x as f64 - m;
                    *v += c * c;
                }
            }
        }
        let std: Vec<F> = var
            .iter()
            .map(|&v| F::fl((v / count.max(1) as f64).sqrt().max(1e-3)))
            .collect();
        *store.value_mut(self.stats_mean) = Tensor::new(vec![d], mean.into_iter().map(F::fl).collect());
        *store.value_mut(self.stats_std) = Tensor::new(vec![d], std);
    }

    /// Standardizes a sequence and left-pads it to a multiple of the
    /// downsampling rate by repeating the first frame. Returns the padded
    /// normalized frames and the pad row count.
    pub fn prepare_input<F: Real>(&self, store: &ParamStore<F>, m: &MotionSequence) -> Result<(Tensor<F>, usize)> {
        let l = self.cfg.downsample;
        let d = self.cfg.frame_dim;
        if m.dim() != d {
            return Err(Error::Shape(format!("sequence dim {} vs codec {}", m.dim(), d)));
        }
        if m.frames() < 1 || m.frames() + (l - m.frames() % l) % l < l {
            return Err(Error::InvalidMotion(format!("need at least one latent step of frames, got {}", m.frames())));
        }
        let pad = (l - m.frames() % l) % l;
        let mean = store.value(self.stats_mean);
        let std = store.value(self.stats_std);
        let total = m.frames() + pad;
        let mut data = Vec::with_capacity(total * d);
        for f in 0..total {
            let src = m.frame(f.saturating_sub(pad).min(m.frames() - 1));
            for (i, &v) in src.iter().enumerate() {
                data.push((F::fl(v as f64) - mean.data[i]) / std.data[i]);
            }
        }
        Ok((Tensor::new(vec![total, d], data), pad))
    }

    /// Normalized padded frames -> latent means, `[T, z]` with `T = F/l`.
    pub fn encode<F: Real, C: Cx<F>>(&self, cx: &mut C, x_norm: &C::T) -> C::T {
        let mut h = x_norm.clone();
        for layer in &self.enc {
            let w = cx.param(layer.w);
            let b = cx.param(layer.b);
            h = cx.causal_conv1d(&h, &w, &b, layer.stride);
            if layer.silu {
                h = cx.silu(&h);
            }
        }
        h
    }

    fn apply_conv<F: Real, C: Cx<F>>(cx: &mut C, h: &C::T, layer: &ConvLayer) -> C::T {
        let w = cx.param(layer.w);
        let b = cx.param(layer.b);
        let mut h = cx.causal_conv1d(h, &w, &b, layer.stride);
        if layer.expand > 1 {
            let shape = cx.shape_of(&h);
            let c = shape[1] / layer.expand;
            h = cx.reshape(&h, vec![shape[0] * layer.expand, c]);
        }
        if layer.silu {
            h = cx.silu(&h);
        }
        h
    }

    /// Latents -> normalized frames, `[T*l, frame_dim]`.
    pub fn decode<F: Real, C: Cx<F>>(&self, cx: &mut C, z: &C::T) -> C::T {
        let mut h = z.clone();
        for layer in &self.dec_trunk {
            h = Self::apply_conv(cx, &h, layer);
        }
        let mut root = h.clone();
        for layer in &self.dec_root {
            root = Self::apply_conv(cx, &root, layer);
        }
        let main = Self::apply_conv(cx, &h, &self.dec_main);
        cx.concat_cols(&root, &main)
    }

    /// Full no-grad encode of a motion sequence; returns latent means and the
    /// pad used.
    pub fn encode_seq<F: Real>(&self, store: &ParamStore<F>, m: &MotionSequence) -> Result<(Tensor<F>, usize)> {
        let (x, pad) = self.prepare_input(store, m)?;
        let mut cx = InferCx::new(store);
        let xn = cx.constant(x);
        let mu = self.encode(&mut cx, &xn);
        Ok((cx.read(&mu), pad))
    }

    /// De-normalizes decoded frames and trims `pad` leading rows.
    pub fn frames_to_motion<F: Real>(
        &self,
        store: &ParamStore<F>,
        decoded_norm: &Tensor<F>,
        fps: f32,
        pad: usize,
    ) -> MotionSequence {
        let d = self.cfg.frame_dim;
        let mean = store.value(self.stats_mean);
        let std = store.value(self.stats_std);
        let total = decoded_norm.rows();
        let mut data = Vec::with_capacity((total - pad) * d);
        for f in pad..total {
            let row = decoded_norm.row(f);
            for (i, &v) in row.iter().enumerate() {
                data.push((v * std.data[i] + mean.data[i]).as_f64() as f32);
            }
        }
        MotionSequence { fps, joints: (d - 8) / 12, data }
    }

    /// Full no-grad decode to a de-normalized motion sequence.
    pub fn decode_to_motion<F: Real>(
        &self,
        store: &ParamStore<F>,
        z: &Tensor<F>,
        fps: f32,
        pad: usize,
    ) -> MotionSequence {
        let mut cx = InferCx::new(store);
        let zn = cx.constant(z.clone());
        let out = self.decode(&mut cx, &zn);
        let decoded = cx.read(&out);
        self.frames_to_motion(store, &decoded, fps, pad)
    }

    /// Streaming decoder with per-layer convolution histories.
    pub fn stream_decoder(&self) -> StreamDecoder {
        StreamDecoder {
            histories: vec![Vec::new(); self.dec_trunk.len() + self.dec_root.len() + 1],
            emitted: 0,
        }
    }
}

/// Robust-variance latent sampling: `z = mu + sigma * eps` with one
/// `sigma ~ U(0, c_sigma)` per latent row and elementwise standard normal
/// `eps`. `c_sigma = 0` returns the means untouched.
pub fn sample_latent<F: Real>(mu: &Tensor<F>, c_sigma: f32, rng: &mut ChaCha8Rng) -> Tensor<F> {
    if c_sigma == 0.0 {
        return mu.clone();
    }
    let (t, z) = (mu.shape[0], mu.shape[1]);
    let mut out = mu.clone();
    for r in 0..t {
        let sigma: f64 = rng.random_range(0.0..c_sigma as f64);
        for c in 0..z {
            let eps: f64 = rng.sample(StandardNormal);
            out.data[r * z + c] = out.data[r * z + c] + F::fl(sigma * eps);
        }
    }
    out
}

/// The four loss terms of one reconstruction, as context handles.
pub struct VaeLossNodes<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
    pub root: T,
}

/// `recon + kl_weight * kl + lambda_root * root` where recon is the MSE over
/// all features, kl the per-element `mu^2/2` mean (the sampled variance is a
/// constant, so only the mean-shrinkage term carries gradient), and root the
/// MSE over the 8 root features. Pad rows are excluded via `loss_rows`.
pub fn vae_loss<F: Real, C: Cx<F>>(
    cx: &mut C,
    cfg: &CodecConfig,
    x_norm: &C::T,
    x_hat: &C::T,
    mu: &C::T,
    loss_rows: &[usize],
) -> VaeLossNodes<C::T> {
    let (x, xh) = if loss_rows.len() == cx.shape_of(x_norm)[0] {
        (x_norm.clone(), x_hat.clone())
    } else {
        (cx.gather_rows(x_norm, loss_rows), cx.gather_rows(x_hat, loss_rows))
    };
    let diff = cx.sub(&xh, &x);
    let sq = cx.mul(&diff, &diff);
    let recon = cx.mean_all(&sq);
    let musq = cx.mul(mu, mu);
    let musq_mean = cx.mean_all(&musq);
    let kl = cx.scale(&musq_mean, F::fl(0.5));
    let droot = cx.slice_cols(&diff, 0, 8);
    let sroot = cx.mul(&droot, &droot);
    let root = cx.mean_all(&sroot);
    let klw = cx.scale(&kl, F::fl(cfg.kl_weight as f64));
    let rootw = cx.scale(&root, F::fl(cfg.lambda_root as f64));
    let t0 = cx.add(&recon, &klw);
    let total = cx.add(&t0, &rootw);
    VaeLossNodes { total, recon, kl, root }
}

/// One causal-conv step against a ring history of the last `k-1` inputs;
/// identical tap order to the batch kernel, so outputs match bit for bit.
fn conv_step(
    store: &ParamStore<f32>,
    layer: &ConvLayer,
    k: usize,
    hist: &mut Vec<Vec<f32>>,
    row: Vec<f32>,
    out_rows: &mut Vec<Vec<f32>>,
) -> Result<()> {
    if hist.len() > k - 1 {
        return Err(Error::StreamState(format!("history grew to {}", hist.len())));
    }
    let w = store.value(layer.w);
    let b = store.value(layer.b);
    let co = w.shape[2];
    let ci = w.shape[1];
    let mut acc = b.data.clone();
    for j in 0..k {
        // tap j reads the row at offset j-(k-1) relative to now
        let back = (k - 1) - j;
        let src: Option<&[f32]> = if back == 0 {
            Some(&row)
        } else if back <= hist.len() {
            Some(&hist[hist.len() - back])
        } else {
            None // zero padding
        };
        let Some(src) = src else { continue };
        for (cin, &xv) in src.iter().enumerate() {
            debug_assert!(cin < ci);
            let wrow = &w.data[(j * ci + cin) * co..(j * ci + cin + 1) * co];
            for (o, &wv) in acc.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    if layer.silu {
        for v in &mut acc {
            *v = crate::num::kernels::silu(*v);
        }
    }
    hist.push(row);
    if hist.len() > k - 1 {
        hist.remove(0);
    }
    if layer.expand > 1 {
        let c = acc.len() / layer.expand;
        for part in acc.chunks(c) {
            out_rows.push(part.to_vec());
        }
    } else {
        out_rows.push(acc);
    }
    Ok(())
}

/// Stateful streaming decode: one latent row in, `l` frames out, bit-equal
/// to the batch decoder.
pub struct StreamDecoder {
    /// Last `k-1` input rows per decoder layer.
    histories: Vec<Vec<Vec<f32>>>,
    emitted: usize,
}

impl StreamDecoder {
    /// Frames emitted so far.
    pub fn frames_emitted(&self) -> usize {
        self.emitted
    }

    /// Decodes the next latent row into `downsample` normalized frame rows.
    pub fn step(&mut self, codec: &Codec, store: &ParamStore<f32>, z_row: &[f32]) -> Result<Vec<Vec<f32>>> {
        if z_row.len() != codec.cfg.z_dim {
            return Err(Error::StreamState(format!(
                "latent width {} does not match codec z_dim {}",
                z_row.len(),
                codec.cfg.z_dim
            )));
        }
        let k = codec.cfg.kernel;
        let mut rows: Vec<Vec<f32>> = vec![z_row.to_vec()];
        for (li, layer) in codec.dec_trunk.iter().enumerate() {
            let mut out_rows = Vec::with_capacity(rows.len() * layer.expand);
            for row in rows {
                conv_step(store, layer, k, &mut self.histories[li], row, &mut out_rows)?;
            }
            rows = out_rows;
        }
        let trunk_n = codec.dec_trunk.len();
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let mut root_rows = vec![row.clone()];
            for (ri, layer) in codec.dec_root.iter().enumerate() {
                let mut next = Vec::with_capacity(root_rows.len());
                for r in root_rows {
                    conv_step(store, layer, k, &mut self.histories[trunk_n + ri], r, &mut next)?;
                }
                root_rows = next;
            }
            let mut main_rows = Vec::with_capacity(1);
            conv_step(store, &codec.dec_main, k, &mut self.histories[trunk_n + codec.dec_root.len()], row, &mut main_rows)?;
            let mut frame = root_rows.remove(0);
            frame.extend(main_rows.remove(0));
            out.push(frame);
        }
        self.emitted += out.len();
        Ok(out)
    }

    /// Streaming step returning de-normalized motion frames.
    pub fn step_motion(&mut self, codec: &Codec, store: &ParamStore<f32>, z_row: &[f32]) -> Result<Vec<Vec<f32>>> {
        let rows = self.step(codec, store, z_row)?;
        let mean = store.value(codec.stats_mean);
        let std = store.value(codec.stats_std);
        Ok(rows
            .into_iter()
            .map(|r| r.iter().enumerate().map(|(i, &v)| v * std.data[i] + mean.data[i]).collect())
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Crop window in frames; a multiple of the downsample rate.
    pub window: usize,
    pub base_lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, window: 96, base_lr: 5e-5, warmup: 100, seed: 0, log_every: 50 }
    }
}

/// Linear warmup to `base`, then cosine decay to zero.
pub fn warmup_cosine_lr(step: usize, total: usize, base: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let p = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecTrainLogRow {
    pub step: usize,
    pub total: f32,
    pub recon: f32,
    pub kl: f32,
    pub root: f32,
    pub lr: f64,
}

pub struct CodecTrainOutcome {
    pub log: Vec<CodecTrainLogRow>,
    pub initial_recon: f32,
    pub final_recon: f32,
}

/// Trains the codec on cropped windows with AdamW under warmup+cosine decay.
/// Aborts (keeping the last finite state) if the loss turns non-finite.
pub fn train_codec(
    store: &mut ParamStore<f32>,
    codec: &Codec,
    train: &[&MotionSequence],
    tcfg: &CodecTrainConfig,
    mut on_log: impl FnMut(&CodecTrainLogRow),
) -> Result<CodecTrainOutcome> {
    assert!(tcfg.window.is_multiple_of(codec.cfg.downsample), "window must be a multiple of the downsample rate");
    store.set_frozen(|name| name.starts_with("codec.stats"));
    let mut opt = AdamW::new();
    let mut log = Vec::new();
    let mut initial_recon = None;
    let mut final_recon = 0.0;
    for step in 0..tcfg.steps {
        let step_seed = tcfg.seed ^ (step as u64).wrapping_mul(0x2545F4914F6CDD1D);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let picks: Vec<(usize, u64)> = (0..tcfg.batch)
            .map(|b| (rng.random_range(0..train.len()), step_seed ^ (b as u64) << 17))
            .collect();
        let results: Vec<Result<(Gradients<f32>, [f32; 4])>> = picks
            .par_iter()
            .map(|&(idx, item_seed)| {
                let mut irng = ChaCha8Rng::seed_from_u64(item_seed);
                let m = train[idx];
                let (x, _pad, rows) = crop_window(codec, store, m, tcfg.window, &mut irng)?;
                let mut tape = Tape::new(store);
                let xn = tape.constant(x);
                let mu = codec.encode(&mut tape, &xn);
                let mu_val = tape.value(mu).clone();
                let noise = sample_latent(&mu_val, codec.cfg.c_sigma, &mut irng);
                let delta = Tensor::new(
                    noise.shape.clone(),
                    noise.data.iter().zip(&mu_val.data).map(|(&a, &b)| a - b).collect(),
                );
                let dn = tape.constant(delta);
                let z = Tape::add(&mut tape, mu, dn);
                let mu = &mu;
                let xh = codec.decode(&mut tape, &z);
                let losses = vae_loss(&mut tape, &codec.cfg, &xn, &xh, mu, &rows);
                let parts = [
                    tape.value(losses.total).scalar_value(),
                    tape.value(losses.recon).scalar_value(),
                    tape.value(losses.kl).scalar_value(),
                    tape.value(losses.root).scalar_value(),
                ];
                if parts.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingAborted(format!("non-finite loss at step {step}")));
                }
                let grads = tape.backward(losses.total)?;
                Ok((grads, parts))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut sums = [0.0f32; 4];
        for r in results {
            let (g, parts) = r?;
            grads.merge(g);
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        let bn = tcfg.batch as f32;
        grads.scale(1.0 / bn);
        grads.clip_global_norm(1.0);
        let lr = warmup_cosine_lr(step, tcfg.steps, tcfg.base_lr, tcfg.warmup);
        opt.step(store, &grads, |_| lr as f32, 0.0)?;
        let row = CodecTrainLogRow {
            step,
            total: sums[0] / bn,
            recon: sums[1] / bn,
            kl: sums[2] / bn,
            root: sums[3] / bn,
            lr,
        };
        if initial_recon.is_none() {
            initial_recon = Some(row.recon);
        }
        final_recon = row.recon;
        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            on_log(&row);
            log.push(row);
        }
    }
    Ok(CodecTrainOutcome { log, initial_recon: initial_recon.unwrap_or(0.0), final_recon })
}

/// Random window of `window` frames (padded with the leading frame when the
/// sequence is shorter); returns normalized frames plus the non-pad row set.
/// A quarter of the crops anchor at frame 0 so the zero-history start
/// transient (which full-sequence decoding always goes through) is trained,
/// not just the steady state.
fn crop_window(
    codec: &Codec,
    store: &ParamStore<f32>,
    m: &MotionSequence,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, usize, Vec<usize>)> {
    let d = m.dim();
    let f = m.frames();
    let cropped = if f >= window {
        let start = if rng.random_range(0.0..1.0f32) < 0.25 { 0 } else { rng.random_range(0..=f - window) };
        MotionSequence { fps: m.fps, joints: m.joints, data: m.data[start * d..(start + window) * d].to_vec() }
    } else {
        m.clone()
    };
    let (x, pad) = codec.prepare_input(store, &cropped)?;
    let rows: Vec<usize> = (pad..x.rows()).collect();
    Ok((x, pad, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};
    use crate::repr::Skeleton;

    fn small_codec(c_sigma: f32) -> (ParamStore<f32>, Codec) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = CodecConfig { width: 24, z_dim: 8, c_sigma, ..Default::default() };
        let codec = Codec::init(&mut store, cfg, &mut rng).unwrap();
        (store, codec)
    }

    fn seq(frames: usize, seed: u64) -> MotionSequence {
        let skel = Skeleton::humanoid22();
        let cfg = CorpusConfig {
            samples: 1,
            min_duration_s: frames as f32 / 30.0,
            max_duration_s: frames as f32 / 30.0 + 0.01,
            ..Default::default()
        };
        generate_corpus(&cfg, &skel, seed).unwrap().remove(0).seq
    }

    #[test]
    fn encode_shape_is_ceil_f_over_l() {
        let (store, codec) = small_codec(0.01);
        let m = seq(16, 1);
        let m8 = MotionSequence { fps: 30.0, joints: 22, data: m.data[..8 * 272].to_vec() };
        let (mu, pad) = codec.encode_seq(&store, &m8).unwrap();
        assert_eq!(pad, 0);
        assert_eq!(mu.shape, vec![2, 8]);
        // non-multiple: 10 frames -> left-pad 2, T = 3
        let m10 = MotionSequence { fps: 30.0, joints: 22, data: m.data[..10 * 272].to_vec() };
        let (mu, pad) = codec.encode_seq(&store, &m10).unwrap();
        assert_eq!(pad, 2);
        assert_eq!(mu.shape, vec![3, 8]);
    }

    #[test]
    fn encoder_is_causal_at_every_chunk_boundary() {
        let (store, codec) = small_codec(0.01);
        let m = seq(24, 2);
        let (mu, _) = codec.encode_seq(&store, &m).unwrap();
        let t = mu.shape[0];
        for j in 0..t - 1 {
            // perturb all frames after (j+1)*l - 1
            let boundary = (j + 1) * codec.cfg.downsample;
            let mut pert = m.clone();
            for f in boundary..pert.frames() {
                for v in pert.frame_mut(f) {
                    *v += 3.0;
                }
            }
            let (mu2, _) = codec.encode_seq(&store, &pert).unwrap();
            for jj in 0..=j {
                assert_eq!(mu.row(jj), mu2.row(jj), "latent {jj} changed by frames >= {boundary}");
            }
        }
    }

    #[test]
    fn sample_latent_moments_match_uniform_times_normal() {
        let mu: Tensor<f32> = Tensor::zeros(vec![100_000, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = sample_latent(&mu, 0.01, &mut rng);
        let n = z.numel() as f64;
        let var = z.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let expect = 0.01f64 / 3.0f64.sqrt(); // std of U(0,c)*N(0,1) is c/sqrt(3)
        assert!((std - expect).abs() / expect < 0.02, "std {std} expect {expect}");
        // zero c_sigma keeps mu exactly
        let z0 = sample_latent(&mu, 0.0, &mut rng);
        assert_eq!(z0.data, mu.data);
        // seeded reproducibility
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_latent(&mu, 0.01, &mut r1).data, sample_latent(&mu, 0.01, &mut r2).data);
    }

    #[test]
    fn streaming_decode_is_bit_identical_to_batch() {
        let (store, codec) = small_codec(0.01);
        let m = seq(32, 3);
        let (mu, _) = codec.encode_seq(&store, &m).unwrap();
        let batch = {
            let mut cx = InferCx::new(&store);
            let z = cx.constant(mu.clone());
            let out = codec.decode(&mut cx, &z);
            cx.read(&out)
        };
        let mut sd = codec.stream_decoder();
        let mut rows = Vec::new();
        for t in 0..mu.shape[0] {
            let out = sd.step(&codec, &store, mu.row(t)).unwrap();
            assert_eq!(out.len(), codec.cfg.downsample);
            rows.extend(out);
        }
        assert_eq!(rows.len(), batch.rows());
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.as_slice(), batch.row(r), "frame {r}");
        }
    }

    #[test]
    fn single_latent_step_emits_exactly_l_frames() {
        let (store, codec) = small_codec(0.0);
        let mut sd = codec.stream_decoder();
        let out = sd.step(&codec, &store, &[0.1; 8]).unwrap();
        assert_eq!(out.len(), 4);
        assert!(sd.step(&codec, &store, &[0.1; 4]).is_err());
    }

    #[test]
    fn vae_loss_matches_scalar_reference_and_zero_case() {
        let (store, codec) = small_codec(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Tensor<f32> = Tensor::randn(vec![8, 272], 1.0, &mut rng);
        let xh: Tensor<f32> = Tensor::randn(vec![8, 272], 1.0, &mut rng);
        let mu: Tensor<f32> = Tensor::randn(vec![2, 8], 1.0, &mut rng);
        let rows: Vec<usize> = (0..8).collect();
        let mut cx = InferCx::new(&store);
        let (xn, xhn, mun) = (cx.constant(x.clone()), cx.constant(xh.clone()), cx.constant(mu.clone()));
        let nodes = vae_loss(&mut cx, &codec.cfg, &xn, &xhn, &mun, &rows);
        let total = cx.read(&nodes.total).scalar_value();
        let recon = cx.read(&nodes.recon).scalar_value();
        let kl = cx.read(&nodes.kl).scalar_value();
        let root = cx.read(&nodes.root).scalar_value();
        // scalar loop reference
        let mut racc = 0.0f64;
        for i in 0..x.numel() {
            racc += ((xh.data[i] - x.data[i]) as f64).powi(2);
        }
        racc /= x.numel() as f64;
        let mut kacc = 0.0f64;
        for &v in &mu.data {
            kacc += 0.5 * (v as f64).powi(2);
        }
        kacc /= mu.numel() as f64;
        let mut oacc = 0.0f64;
        for r in 0..8 {
            for c in 0..8 {
                oacc += ((xh.data[r * 272 + c] - x.data[r * 272 + c]) as f64).powi(2);
            }
        }
        oacc /= 64.0;
        assert!((recon as f64 - racc).abs() < 1e-6);
        assert!((kl as f64 - kacc).abs() < 1e-6);
        assert!((root as f64 - oacc).abs() < 1e-6);
        let want_total = racc + 1e-4 * kacc + 1.0 * oacc;
        assert!((total as f64 - want_total).abs() < 1e-5);
        // perfect reconstruction with zero mu is exactly zero
        let mut cx = InferCx::new(&store);
        let a = cx.constant(x.clone());
        let b = cx.constant(x.clone());
        let z = cx.constant(Tensor::zeros(vec![2, 8]));
        let nodes = vae_loss(&mut cx, &codec.cfg, &a, &b, &z, &rows);
        assert_eq!(cx.read(&nodes.total).scalar_value(), 0.0);
        // mu = 1 everywhere -> per-element kl 0.5
        let mut cx = InferCx::new(&store);
        let a = cx.constant(x.clone());
        let b = cx.constant(x.clone());
        let ones = cx.constant(Tensor::full(vec![2, 8], 1.0));
        let nodes = vae_loss(&mut cx, &codec.cfg, &a, &b, &ones, &rows);
        assert_eq!(cx.read(&nodes.kl).scalar_value(), 0.5);
    }

    #[test]
    fn codec_gradcheck_through_encode_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f64> = ParamStore::new();
        let cfg = CodecConfig { width: 6, z_dim: 4, frame_dim: 10, ..Default::default() };
        let codec = Codec::init(&mut store, cfg, &mut rng).unwrap();
        store.set_frozen(|n| n.starts_with("codec.stats"));
        let ids: Vec<_> = store.ids().filter(|&i| store.trainable(i)).collect();
        let err = crate::num::gradcheck::max_rel_error(
            &mut store,
            &ids,
            |tape, _| {
                let mut r = ChaCha8Rng::seed_from_u64(3);
                let x = tape.constant(Tensor::randn(vec![8, 10], 1.0, &mut r));
                let mu = codec.encode(tape, &x);
                let xh = codec.decode(tape, &mu);
                let rows: Vec<usize> = (0..8).collect();
                let cfg2 = codec.cfg;
                let nodes = vae_loss(tape, &cfg2, &x, &xh, &mu, &rows);
                nodes.total
            },
            1e-4,
        );
        assert!(err <= 1e-3, "rel err {err}");
    }

    /// Short smoke-training run: loss decreases and stays finite.
    #[test]
    fn codec_smoke_training_reduces_loss() {
        let skel = Skeleton::humanoid22();
        let cfg = CorpusConfig { samples: 8, min_duration_s: 2.0, max_duration_s: 3.0, ..Default::default() };
        let corpus = generate_corpus(&cfg, &skel, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ccfg = CodecConfig { width: 24, z_dim: 8, ..Default::default() };
        let codec = Codec::init(&mut store, ccfg, &mut rng).unwrap();
        let seqs: Vec<&MotionSequence> = corpus.iter().map(|s| &s.seq).collect();
        codec.fit_stats(&mut store, &seqs);
        let tcfg = CodecTrainConfig { steps: 60, batch: 4, window: 32, base_lr: 3e-4, warmup: 10, seed: 3, log_every: 20 };
        let out = train_codec(&mut store, &codec, &seqs, &tcfg, |_| {}).unwrap();
        assert!(out.final_recon < out.initial_recon, "{} -> {}", out.initial_recon, out.final_recon);
        // stats stayed frozen
        assert!(!store.trainable(codec.stats_mean));
    }
}
