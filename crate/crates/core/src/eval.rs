//! Latency benchmarking and the evaluation harness.

use crate::backbone::Task;
use crate::data::assemble::assemble;
use crate::data::families::{classify, MotionKind};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::generate::{caption, generate_stream, CaptionOptions, GenerateOptions, TokenLatency};
use crate::model::UnifiedModel;
use crate::num::{Cx, InferCx, ParamStore};
use crate::repr::metrics::{compression_ratio, mpjpe, mpjre, sjpe};
use crate::repr::{recover_motion, MotionSequence, Skeleton};
use crate::tokenizer::{Tokenizer, EOS};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    fn from_samples(mut xs: Vec<f64>) -> Self {
        assert!(!xs.is_empty());
        xs.sort_by(f64::total_cmp);
        let q = |p: f64| xs[((xs.len() - 1) as f64 * p).round() as usize];
        Self {
            mean_ms: xs.iter().sum::<f64>() / xs.len() as f64,
            p50_ms: q(0.5),
            p90_ms: q(0.9),
            p99_ms: q(0.99),
        }
    }
}

/// Per-token wall-time split plus the real-time budget
/// `1000 / motion_fps * downsample`.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub tokens: usize,
    pub flow_steps: usize,
    pub backbone: LatencyStats,
    pub flow_head: LatencyStats,
    pub vae_decode: LatencyStats,
    pub other: LatencyStats,
    pub total: LatencyStats,
    pub realtime_budget_ms: f64,
    /// Informative only; hardware-dependent.
    pub realtime_at_p50: bool,
}

impl LatencyReport {
    pub fn from_tokens(tokens: &[TokenLatency], flow_steps: usize, fps: f64, downsample: usize) -> Self {
        let budget = 1000.0 / fps * downsample as f64;
        let pick = |f: fn(&TokenLatency) -> f64| LatencyStats::from_samples(tokens.iter().map(f).collect());
        let total = pick(|t| t.total_ms);
        Self {
            tokens: tokens.len(),
            flow_steps,
            backbone: pick(|t| t.backbone_ms),
            flow_head: pick(|t| t.flow_head_ms),
            vae_decode: pick(|t| t.vae_decode_ms),
            other: pick(|t| t.other_ms),
            realtime_at_p50: total.p50_ms <= budget,
            total,
            realtime_budget_ms: budget,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "token latency over {} tokens ({} flow steps), budget {:.2} ms\n",
            self.tokens, self.flow_steps, self.realtime_budget_ms
        ));
        s.push_str("component      mean      p50      p90      p99\n");
        for (name, st) in [
            ("backbone", &self.backbone),
            ("flow_head", &self.flow_head),
            ("vae_decode", &self.vae_decode),
            ("other", &self.other),
            ("total", &self.total),
        ] {
            s.push_str(&format!(
                "{name:<12} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                st.mean_ms, st.p50_ms, st.p90_ms, st.p99_ms
            ));
        }
        s.push_str(&format!(
            "p50 within real-time budget: {}\n",
            if self.realtime_at_p50 { "yes" } else { "no" }
        ));
        s
    }
}

/// Generates `warmup + n_tokens` latents from the prompt (exit disabled) and
/// reports the per-component timing of the measured tail.
pub fn bench(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    tokenizer: &Tokenizer,
    prompt: &str,
    n_tokens: usize,
    warmup: usize,
    flow_steps: usize,
    seed: u64,
) -> Result<LatencyReport> {
    let opts = GenerateOptions {
        max_latents: warmup + n_tokens,
        min_latents: warmup + n_tokens,
        exit_threshold: 2.0, // sigmoid < 1: never stops early
        flow_steps,
        seed,
        ..Default::default()
    };
    let run = generate_stream(store, model, tokenizer, prompt, opts, |_, _| {})?;
    let measured = &run.token_latencies[warmup.min(run.token_latencies.len() - 1)..];
    Ok(LatencyReport::from_tokens(
        measured,
        flow_steps,
        opts.fps as f64,
        model.cfg.codec.downsample,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecEval {
    pub mpjpe_mm: f64,
    pub mpjre_deg: f64,
    pub sjpe: f64,
    pub sjpe_under: f64,
    pub sjpe_over: f64,
    pub compression_percent: f64,
    /// Frame-hold at the same temporal rate: the no-learning reference the
    /// codec must beat.
    pub hold_baseline_mpjpe_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationEval {
    pub semantic_accuracy: f64,
    pub per_family: BTreeMap<String, [usize; 2]>,
    pub mean_generated_frames: f64,
    pub mean_gt_frames: f64,
    /// mean generated length / mean ground-truth length
    pub length_ratio: f64,
    pub exit_stop_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionEval {
    pub exact_match: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub codec: CodecEval,
    pub generation: GenerationEval,
    pub captioning: CaptionEval,
}

/// Frame-hold reconstruction: every frame is replaced by the most recent
/// frame on the `l`-grid.
pub fn hold_baseline(m: &MotionSequence, l: usize) -> MotionSequence {
    let mut data = Vec::with_capacity(m.data.len());
    for f in 0..m.frames() {
        data.extend_from_slice(m.frame((f / l) * l));
    }
    MotionSequence { fps: m.fps, joints: m.joints, data }
}

/// Codec-only reconstruction metrics over a split.
pub fn evaluate_codec(
    store: &ParamStore<f32>,
    codec: &crate::codec::Codec,
    skel: &Skeleton,
    samples: &[Sample],
) -> Result<CodecEval> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empty eval split".into()));
    }
    let mut pe = 0.0;
    let mut re = 0.0;
    let mut hold_pe = 0.0;
    let mut sj = [0.0f64; 3];
    let mut sj_n = 0usize;
    for s in samples {
        let (mu, pad) = codec.encode_seq(store, &s.seq)?;
        let rec = codec.decode_to_motion(store, &mu, s.seq.fps, pad);
        let gt_pose = recover_motion(&s.seq, skel)?;
        let rec_pose = recover_motion(&rec, skel)?;
        pe += mpjpe(&rec_pose, &gt_pose)?;
        re += mpjre(&rec_pose, &gt_pose)?;
        let hold = hold_baseline(&s.seq, codec.cfg.downsample);
        let hold_pose = recover_motion(&hold, skel)?;
        hold_pe += mpjpe(&hold_pose, &gt_pose)?;
        if let Ok(v) = sjpe(&rec_pose, &gt_pose) {
            sj[0] += v.total;
            sj[1] += v.under;
            sj[2] += v.over;
            sj_n += 1;
        }
    }
    let n = samples.len() as f64;
    let sj_n = sj_n.max(1) as f64;
    Ok(CodecEval {
        mpjpe_mm: pe / n,
        mpjre_deg: re / n,
        sjpe: sj[0] / sj_n,
        sjpe_under: sj[1] / sj_n,
        sjpe_over: sj[2] / sj_n,
        compression_percent: compression_ratio(codec.cfg.z_dim, codec.cfg.downsample, codec.cfg.frame_dim),
        hold_baseline_mpjpe_mm: hold_pe / n,
    })
}

/// Full evaluation: codec reconstruction, semantic-oracle generation
/// accuracy, exit-length calibration, and captioning accuracy. Deterministic
/// given the seed.
pub fn evaluate(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    tokenizer: &Tokenizer,
    skel: &Skeleton,
    samples: &[Sample],
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empty eval split".into()));
    }
    let codec_eval = evaluate_codec(store, &model.codec, skel, samples)?;
    // generation against the kinematic oracle
    let l = model.cfg.codec.downsample;
    let max_gt_latents = samples.iter().map(|s| s.seq.frames().div_ceil(l)).max().unwrap_or(16);
    let mut hits = 0usize;
    let mut per_family: BTreeMap<String, [usize; 2]> = BTreeMap::new();
    let mut gen_frames = 0.0;
    let mut gt_frames = 0.0;
    let mut exit_stops = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let opts = GenerateOptions {
            max_latents: max_gt_latents * 2,
            seed: seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15),
            ..Default::default()
        };
        let run = generate_stream(store, model, tokenizer, &s.record.caption, opts, |_, _| {})?;
        let entry = per_family.entry(s.record.family.to_string()).or_insert([0, 0]);
        entry[1] += 1;
        let got: Option<MotionKind> = recover_motion(&run.motion, skel).ok().map(|p| classify(&p, skel));
        if got == Some(s.record.family) {
            hits += 1;
            entry[0] += 1;
        }
        gen_frames += run.motion.frames() as f64;
        gt_frames += s.seq.frames() as f64;
        if run.stopped_by_exit {
            exit_stops += 1;
        }
    }
    let n = samples.len() as f64;
    let generation = GenerationEval {
        semantic_accuracy: hits as f64 / n,
        per_family,
        mean_generated_frames: gen_frames / n,
        mean_gt_frames: gt_frames / n,
        length_ratio: (gen_frames / n) / (gt_frames / n),
        exit_stop_rate: exit_stops as f64 / n,
    };
    // captioning: exact match via greedy decode, token accuracy teacher-forced
    let mut exact = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    for s in samples {
        let got = caption(store, model, tokenizer, &s.seq, CaptionOptions::default())?;
        if got.text == s.record.caption {
            exact += 1;
        }
        let ids = tokenizer.encode(&s.record.caption);
        let (mu, _) = model.codec.encode_seq(store, &s.seq)?;
        let latents: Vec<Vec<f32>> = (0..mu.shape[0]).map(|r| mu.row(r).to_vec()).collect();
        let seq = assemble(&ids, &latents, Task::MotionToText)?;
        let mut cx = InferCx::new(store);
        let hidden = model.backbone.forward(&mut cx, &seq.items, &model.adapter)?;
        let positions: Vec<usize> = seq.ntp_targets.iter().map(|&(p, _)| p).collect();
        let hrows = cx.gather_rows(&hidden, &positions);
        let logits = model.backbone.lm_logits(&mut cx, &hrows);
        let lg = cx.read(&logits);
        let v = lg.last_dim();
        for (r, &(_, target)) in seq.ntp_targets.iter().enumerate() {
            let row = lg.row(r);
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if x > best_v {
                    best_v = x;
                    best = j;
                }
            }
            let _ = v;
            if best as u32 == target {
                tok_hits += 1;
            }
            tok_total += 1;
        }
        let _ = EOS;
    }
    let captioning = CaptionEval {
        exact_match: exact as f64 / n,
        token_accuracy: tok_hits as f64 / tok_total.max(1) as f64,
    };
    Ok(EvalReport { samples: samples.len(), codec: codec_eval, generation, captioning })
}
