//! Streaming text-to-motion generation and motion captioning.
//!
//! A generation session holds the KV cache, the codec stream state, and the
//! rng. Each step conditions the flow head on the hidden state at the
//! position producing the next latent, samples it with the Euler integrator,
//! and decodes it into `l` frames immediately; the exit head (read at the
//! same producer position) stops the loop after a minimum length.

use crate::backbone::Item;
use crate::error::{Error, Result};
use crate::model::UnifiedModel;
use crate::num::{Cx, InferCx, KvCache, ParamStore, Tensor};
use crate::repr::MotionSequence;
use crate::tokenizer::{Tokenizer, BOM, BOS, EOM, EOS, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub max_latents: usize,
    pub exit_threshold: f32,
    pub min_latents: usize,
    pub guidance: f32,
    pub flow_steps: usize,
    pub fps: f32,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_latents: 64,
            exit_threshold: 0.5,
            min_latents: 2,
            guidance: 1.0,
            flow_steps: 50,
            fps: 30.0,
            seed: 0,
        }
    }
}

/// Wall-clock split of one generated latent, milliseconds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TokenLatency {
    pub backbone_ms: f64,
    pub flow_head_ms: f64,
    pub vae_decode_ms: f64,
    pub other_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug)]
pub struct GenerationResult {
    pub motion: MotionSequence,
    pub latents: Vec<Vec<f32>>,
    pub latent_count: usize,
    pub stopped_by_exit: bool,
    pub token_latencies: Vec<TokenLatency>,
}

pub struct GenerationSession<'m> {
    store: &'m ParamStore<f32>,
    model: &'m UnifiedModel,
    opts: GenerateOptions,
    cache: KvCache<f32>,
    stream: crate::codec::StreamDecoder,
    rng: ChaCha8Rng,
    h_last: Vec<f32>,
    latents: usize,
    stopped: bool,
    stopped_by_exit: bool,
    frames: Vec<Vec<f32>>,
    latent_history: Vec<Vec<f32>>,
    latencies: Vec<TokenLatency>,
}

impl<'m> GenerationSession<'m> {
    /// Tokenizes the prompt and runs the `[BOS] prompt [BOM]` prefill.
    pub fn start(
        store: &'m ParamStore<f32>,
        model: &'m UnifiedModel,
        tokenizer: &Tokenizer,
        prompt: &str,
        opts: GenerateOptions,
    ) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyInput("empty prompt".into()));
        }
        let ids = tokenizer.encode(prompt);
        if ids.is_empty() {
            return Err(Error::EmptyInput("prompt tokenized to nothing".into()));
        }
        if tokenizer.vocab_size() > model.cfg.model.vocab {
            return Err(Error::CheckpointMismatch(format!(
                "tokenizer vocab {} exceeds model vocab {}",
                tokenizer.vocab_size(),
                model.cfg.model.vocab
            )));
        }
        let mut items = vec![Item::Text(BOS)];
        items.extend(ids.into_iter().map(Item::Text));
        items.push(Item::Text(BOM));
        let mut cache = model.backbone.new_cache();
        let h = model.backbone.forward_cached(store, &mut cache, &items, &model.adapter)?;
        let h_last = h.row(h.rows() - 1).to_vec();
        Ok(Self {
            store,
            model,
            opts,
            cache,
            stream: model.codec.stream_decoder(),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            h_last,
            latents: 0,
            stopped: false,
            stopped_by_exit: false,
            frames: Vec::new(),
            latent_history: Vec::new(),
            latencies: Vec::new(),
        })
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn latent_count(&self) -> usize {
        self.latents
    }

    /// Generates the next latent and emits its `l` frames. Returns `None`
    /// once stopped; a stopped session never emits again.
    pub fn step(&mut self) -> Result<Option<Vec<Vec<f32>>>> {
        if self.stopped {
            return Ok(None);
        }
        let t_start = Instant::now();
        // exit decision for the latent about to be produced at this position
        let exit_p = self.model.exit.probability(self.store, &self.h_last);
        let cond = {
            let mut cx = InferCx::new(self.store);
            let h = cx.constant(Tensor::new(vec![1, self.h_last.len()], self.h_last.clone()));
            let c = self.model.projector.forward(&mut cx, &h);
            cx.read(&c).data
        };
        let t_flow = Instant::now();
        let z = self.model.flow.sample(
            self.store,
            &cond,
            self.opts.flow_steps,
            self.opts.guidance,
            &mut self.rng,
        )?;
        let flow_ms = t_flow.elapsed().as_secs_f64() * 1e3;
        let t_vae = Instant::now();
        let block = self.stream.step_motion(&self.model.codec, self.store, &z)?;
        let vae_ms = t_vae.elapsed().as_secs_f64() * 1e3;
        self.frames.extend(block.iter().cloned());
        self.latent_history.push(z.clone());
        self.latents += 1;
        let t_backbone = Instant::now();
        let h = self.model.backbone.forward_cached(
            self.store,
            &mut self.cache,
            &[Item::Motion(z)],
            &self.model.adapter,
        )?;
        self.h_last = h.row(0).to_vec();
        let backbone_ms = t_backbone.elapsed().as_secs_f64() * 1e3;
        let total_ms = t_start.elapsed().as_secs_f64() * 1e3;
        self.latencies.push(TokenLatency {
            backbone_ms,
            flow_head_ms: flow_ms,
            vae_decode_ms: vae_ms,
            other_ms: (total_ms - backbone_ms - flow_ms - vae_ms).max(0.0),
            total_ms,
        });
        if (exit_p > self.opts.exit_threshold && self.latents >= self.opts.min_latents)
            || self.latents >= self.opts.max_latents
        {
            self.stopped = true;
            self.stopped_by_exit = exit_p > self.opts.exit_threshold;
        }
        Ok(Some(block))
    }

    /// Appends the closing `[EOM]` and packages the emitted frames.
    pub fn finish(mut self) -> Result<GenerationResult> {
        self.stopped = true;
        self.model
            .backbone
            .forward_cached(self.store, &mut self.cache, &[Item::Text(EOM)], &self.model.adapter)?;
        let dim = self.model.cfg.codec.frame_dim;
        let mut data = Vec::with_capacity(self.frames.len() * dim);
        for f in &self.frames {
            data.extend_from_slice(f);
        }
        Ok(GenerationResult {
            motion: MotionSequence { fps: self.opts.fps, joints: (dim - 8) / 12, data },
            latents: self.latent_history,
            latent_count: self.latents,
            stopped_by_exit: self.stopped_by_exit,
            token_latencies: self.latencies,
        })
    }
}

/// Runs a whole generation session, handing each emitted frame block to the
/// callback as soon as it exists.
pub fn generate_stream(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    tokenizer: &Tokenizer,
    prompt: &str,
    opts: GenerateOptions,
    mut on_block: impl FnMut(usize, &[Vec<f32>]),
) -> Result<GenerationResult> {
    let mut session = GenerationSession::start(store, model, tokenizer, prompt, opts)?;
    let mut idx = 0usize;
    while let Some(block) = session.step()? {
        on_block(idx, &block);
        idx += 1;
    }
    session.finish()
}

#[derive(Debug, Clone, Copy)]
pub struct CaptionOptions {
    pub max_tokens: usize,
    /// 0 means greedy decoding.
    pub temperature: f32,
    pub seed: u64,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self { max_tokens: 48, temperature: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CaptionResult {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub truncated: bool,
}

/// Captions a motion: encodes it with `z = mu` (inference applies no latent
/// noise), feeds `[BOS][BOM] z.. [EOM]`, and decodes text until `[EOS]`.
pub fn caption(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    tokenizer: &Tokenizer,
    motion: &MotionSequence,
    opts: CaptionOptions,
) -> Result<CaptionResult> {
    let l = model.cfg.codec.downsample;
    if motion.frames() < l {
        return Err(Error::InvalidMotion(format!(
            "motion has {} frames, needs at least one latent step ({l})",
            motion.frames()
        )));
    }
    let (mu, _) = model.codec.encode_seq(store, motion)?;
    let mut items = vec![Item::Text(BOS), Item::Text(BOM)];
    for r in 0..mu.shape[0] {
        items.push(Item::Motion(mu.row(r).to_vec()));
    }
    items.push(Item::Text(EOM));
    let mut cache = model.backbone.new_cache();
    let h = model.backbone.forward_cached(store, &mut cache, &items, &model.adapter)?;
    let mut h_last = h.row(h.rows() - 1).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ids = Vec::new();
    let mut truncated = true;
    for _ in 0..opts.max_tokens {
        let logits = {
            let mut cx = InferCx::new(store);
            let hr = cx.constant(Tensor::new(vec![1, h_last.len()], h_last.clone()));
            let lg = model.backbone.lm_logits(&mut cx, &hr);
            cx.read(&lg).data
        };
        let next = pick_token(&logits[..tokenizer.vocab_size().min(logits.len())], opts.temperature, &mut rng);
        if next == EOS {
            truncated = false;
            break;
        }
        ids.push(next);
        let hn = model
            .backbone
            .forward_cached(store, &mut cache, &[Item::Text(next)], &model.adapter)?;
        h_last = hn.row(0).to_vec();
    }
    Ok(CaptionResult { text: tokenizer.decode(&ids), token_ids: ids, truncated })
}

/// Greedy or temperature sampling over non-special ids (plus `[EOS]`).
fn pick_token(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> u32 {
    let blocked = |id: usize| id == PAD as usize || id == BOS as usize || id == BOM as usize || id == EOM as usize;
    if temperature <= 0.0 {
        let mut best = EOS as usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in logits.iter().enumerate() {
            if blocked(i) {
                continue;
            }
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best as u32
    } else {
        use rand::Rng as _;
        let mut probs: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| if blocked(i) { f64::NEG_INFINITY } else { (v / temperature) as f64 })
            .collect();
        let mx = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in &mut probs {
            *p = (*p - mx).exp();
            sum += *p;
        }
        let mut u: f64 = rng.random_range(0.0..1.0) * sum;
        for (i, &p) in probs.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return i as u32;
            }
        }
        (probs.len() - 1) as u32
    }
}
