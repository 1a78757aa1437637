//! Three-stage training recipe: objective composition, per-module learning
//! rate schedules, task sampling, trainable-set switching, and
//! teacher-forcing noise. Also hosts the small text-LM pretraining that
//! produces the frozen base checkpoint.

use crate::backbone::{InterleavedSequence, Item, Task};
use crate::codec::warmup_cosine_lr;
use crate::data::assemble::assemble;
use crate::data::families::MotionKind;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::heads::{exit_loss, FlowDraws, FlowHeadConfig};
use crate::model::UnifiedModel;
use crate::num::{AdamW, Cx, Gradients, InferCx, ParamStore, Tape};
use crate::repr::Skeleton;
use crate::tokenizer::{Tokenizer, EOS};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Schedule {
    Constant,
    Cosine,
    None,
}

/// One row of the staged recipe.
#[derive(Debug, Clone, Serialize)]
pub struct StageConfig {
    pub stage: u8,
    pub base_lr: f64,
    pub ar_schedule: Schedule,
    pub head_schedule: Schedule,
    /// CE weight (lambda 1).
    pub lambda_ce: f64,
    /// BCE weight (lambda 2).
    pub lambda_bce: f64,
    /// Full-scale step count; divided by the desk scale at run time.
    pub steps: usize,
    pub t2m_ratio: f64,
    pub m2t_ratio: f64,
}

impl StageConfig {
    /// The published three-stage recipe.
    pub fn table(stage: u8) -> Self {
        match stage {
            1 => Self {
                stage: 1,
                base_lr: 1e-4,
                ar_schedule: Schedule::Constant,
                head_schedule: Schedule::Constant,
                lambda_ce: 0.05,
                lambda_bce: 1e-3,
                steps: 100_000,
                t2m_ratio: 0.5,
                m2t_ratio: 0.5,
            },
            2 => Self {
                stage: 2,
                base_lr: 1e-4,
                ar_schedule: Schedule::Cosine,
                head_schedule: Schedule::Constant,
                lambda_ce: 0.05,
                lambda_bce: 1e-3,
                steps: 200_000,
                t2m_ratio: 0.8,
                m2t_ratio: 0.2,
            },
            3 => Self {
                stage: 3,
                base_lr: 1e-5,
                ar_schedule: Schedule::None,
                head_schedule: Schedule::Cosine,
                lambda_ce: 0.0,
                lambda_bce: 1e-2,
                steps: 50_000,
                t2m_ratio: 1.0,
                m2t_ratio: 0.0,
            },
            other => panic!("no stage {other} in the recipe"),
        }
    }

    /// Module set trained in this stage. The condition projector counts as
    /// part of the flow-head assembly throughout.
    pub fn trainable(&self, name: &str) -> bool {
        match self.stage {
            1 => {
                name.starts_with("adapter.") || name.starts_with("projector.") || name.starts_with("flow.")
            }
            2 => {
                name.starts_with("motion.")
                    || name.starts_with("adapter.")
                    || name.starts_with("projector.")
                    || name.starts_with("flow.")
                    || name.starts_with("exit.")
                    || name.starts_with("special.")
            }
            3 => name.starts_with("flow.") || name.starts_with("projector.") || name.starts_with("exit."),
            _ => false,
        }
    }
}

/// `L = L_flow + lambda_ce * L_ntp + lambda_bce * L_end`, exactly linear in
/// its parts.
pub fn compose_objective(flow: f64, ntp: f64, end: f64, stage: &StageConfig) -> f64 {
    flow + stage.lambda_ce * ntp + stage.lambda_bce * end
}

/// Scheduler value without warmup: constant keeps the base; cosine decays
/// `base/2 * (1 + cos(pi * step/total))`; `None` is zero (module untrained).
pub fn lr_at(step: usize, total: usize, base: f64, schedule: Schedule) -> f64 {
    assert!(total > 0, "scheduler needs a positive total step count");
    assert!(step <= total, "step beyond schedule end");
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        Schedule::None => 0.0,
    }
}

/// Linear warmup over the first `warmup` steps prepended to [`lr_at`].
pub fn lr_with_warmup(step: usize, total: usize, base: f64, schedule: Schedule, warmup: usize) -> f64 {
    if schedule == Schedule::None {
        return 0.0;
    }
    if warmup > 0 && step < warmup {
        let target = lr_at(warmup, total, base, schedule);
        return target * (step + 1) as f64 / warmup as f64;
    }
    lr_at(step, total, base, schedule)
}

/// Teacher-forcing noise on *input* motion latents. The published value
/// `N(0, 0.01)` reads as a variance by default (std 0.1); flip
/// `is_variance` to treat it as a std instead.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NoiseConfig {
    pub value: f64,
    pub is_variance: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { value: 0.01, is_variance: true }
    }
}

impl NoiseConfig {
    pub fn std(&self) -> f64 {
        if self.is_variance {
            self.value.sqrt()
        } else {
            self.value
        }
    }
}

/// Adds elementwise Gaussian noise to the motion items of a sequence; loss
/// targets are untouched.
pub fn apply_teacher_forcing_noise(seq: &InterleavedSequence, std: f64, rng: &mut ChaCha8Rng) -> InterleavedSequence {
    if std == 0.0 {
        return seq.clone();
    }
    let mut out = seq.clone();
    for item in &mut out.items {
        if let Item::Motion(z) = item {
            for v in z.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *v += (eta * std) as f32;
            }
        }
    }
    out
}

/// Bernoulli draw over the stage's task ratio.
pub fn sample_task(rng: &mut ChaCha8Rng, stage: &StageConfig) -> Task {
    debug_assert!((stage.t2m_ratio + stage.m2t_ratio - 1.0).abs() < 1e-9, "task ratios must sum to 1");
    if rng.random_range(0.0..1.0) < stage.t2m_ratio {
        Task::TextToMotion
    } else {
        Task::MotionToText
    }
}

/// A corpus sample after tokenization and motion encoding.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub caption: String,
    pub caption_ids: Vec<u32>,
    pub latents: Vec<Vec<f32>>,
    pub family: MotionKind,
    pub expressive: bool,
    pub gt_frames: usize,
}

/// Tokenizes captions and encodes motions to latent means (`z = mu`).
pub fn prepare_samples(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    tokenizer: &Tokenizer,
    skel: &Skeleton,
    samples: &[Sample],
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let (mu, _) = model.codec.encode_seq(store, &s.seq)?;
            let z = mu.shape[1];
            let latents = (0..mu.shape[0]).map(|r| mu.row(r).to_vec()).collect::<Vec<_>>();
            let _ = z;
            Ok(PreparedSample {
                caption: s.record.caption.clone(),
                caption_ids: tokenizer.encode(&s.record.caption),
                latents,
                family: s.record.family,
                expressive: !crate::data::families::is_static(&s.pose, skel),
                gt_frames: s.seq.frames(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageLogRow {
    pub stage: u8,
    pub step: usize,
    pub flow: f64,
    pub ntp: f64,
    pub end: f64,
    pub total: f64,
    pub lr_ar: f64,
    pub lr_head: f64,
}

pub struct StageOutcome {
    pub rows: Vec<StageLogRow>,
    pub flow_eval_before: f64,
    pub flow_eval_after: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Divides the recipe's full-scale step counts.
    pub desk_scale: usize,
    pub batch: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub grad_clip: f64,
    /// Warmup fraction of the scaled step count (1% desk default).
    pub warmup_frac: f64,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            desk_scale: 100,
            batch: 32,
            seed: 0,
            noise: NoiseConfig::default(),
            grad_clip: 1.0,
            warmup_frac: 0.01,
            log_every: 25,
        }
    }
}

fn always_frozen(name: &str) -> bool {
    name.starts_with("text.") || name.starts_with("codec.")
}

fn is_ar_group(name: &str) -> bool {
    name.starts_with("motion.") || name.starts_with("adapter.") || name.starts_with("special.")
}

/// Builds one item's taped loss; returns the scalar node plus raw parts.
fn item_loss(
    tape: &mut Tape<'_, f32>,
    model: &UnifiedModel,
    seq: &InterleavedSequence,
    stage: &StageConfig,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(crate::num::NodeId, [f64; 3])> {
    let input = if seq.task == Task::TextToMotion {
        apply_teacher_forcing_noise(seq, noise_std, rng)
    } else {
        seq.clone()
    };
    let hidden = model.backbone.forward(tape, &input.items, &model.adapter)?;
    let mut parts = [0.0f64; 3];
    let mut total: Option<crate::num::NodeId> = None;
    if !seq.flow_targets.is_empty() {
        let positions: Vec<usize> = seq.flow_targets.iter().map(|&(p, _)| p).collect();
        let x0: Vec<&[f32]> = seq.flow_targets.iter().map(|(_, z)| z.as_slice()).collect();
        let hrows = tape.gather_rows(hidden, &positions);
        let cond = model.projector.forward(tape, &hrows);
        let draws = FlowDraws::sample(x0.len(), model.cfg.codec.z_dim, &model.flow.cfg, rng);
        let flow = model.flow.flow_loss(tape, &cond, &x0, &draws);
        parts[0] = tape.value(flow).scalar_value() as f64;
        total = Some(flow);
    }
    if !seq.ntp_targets.is_empty() && stage.lambda_ce != 0.0 {
        let positions: Vec<usize> = seq.ntp_targets.iter().map(|&(p, _)| p).collect();
        let targets: Vec<usize> = seq.ntp_targets.iter().map(|&(_, t)| t as usize).collect();
        let hrows = tape.gather_rows(hidden, &positions);
        let logits = model.backbone.lm_logits(tape, &hrows);
        let ce = tape.cross_entropy_mean(logits, &targets);
        parts[1] = tape.value(ce).scalar_value() as f64;
        let w = tape.scale(ce, stage.lambda_ce as f32);
        total = Some(match total {
            Some(t) => tape.add(t, w),
            None => w,
        });
    }
    if !seq.exit_labels.is_empty() && stage.lambda_bce != 0.0 {
        let positions: Vec<usize> = seq.exit_labels.iter().map(|&(p, _)| p).collect();
        let labels: Vec<f32> = seq.exit_labels.iter().map(|&(_, l)| l).collect();
        let hrows = tape.gather_rows(hidden, &positions);
        let logits = model.exit.logits(tape, &hrows);
        let bce = exit_loss(tape, &logits, &labels)?;
        parts[2] = tape.value(bce).scalar_value() as f64;
        let w = tape.scale(bce, stage.lambda_bce as f32);
        total = Some(match total {
            Some(t) => tape.add(t, w),
            None => w,
        });
    }
    let total = total.ok_or_else(|| Error::EmptyInput("sequence produced no loss terms".into()))?;
    Ok((total, parts))
}

/// Deterministic flow-matching eval loss (no condition dropout, fixed draws)
/// over a prepared set.
pub fn eval_flow_loss(
    store: &ParamStore<f32>,
    model: &UnifiedModel,
    set: &[PreparedSample],
    seed: u64,
) -> Result<f64> {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    let eval_cfg = FlowHeadConfig { p_uncond: 0.0, ..model.flow.cfg };
    for (i, ps) in set.iter().enumerate() {
        let seq = assemble(&ps.caption_ids, &ps.latents, Task::TextToMotion)?;
        let mut cx = InferCx::new(store);
        let hidden = model.backbone.forward(&mut cx, &seq.items, &model.adapter)?;
        let positions: Vec<usize> = seq.flow_targets.iter().map(|&(p, _)| p).collect();
        let x0: Vec<&[f32]> = seq.flow_targets.iter().map(|(_, z)| z.as_slice()).collect();
        let hrows = cx.gather_rows(&hidden, &positions);
        let cond = model.projector.forward(&mut cx, &hrows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let draws = FlowDraws::sample(x0.len(), model.cfg.codec.z_dim, &eval_cfg, &mut rng);
        let loss = model.flow.flow_loss(&mut cx, &cond, &x0, &draws);
        acc += cx.read(&loss).scalar_value() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput("flow eval set is empty".into()));
    }
    Ok(acc / count as f64)
}

/// Runs one recipe stage at desk scale. Trains exactly the stage's module
/// set; every other tensor is checksummed before and after, and any change
/// aborts the run. Stage 3 restricts data to the expressive (non-static)
/// subset.
pub fn run_stage(
    store: &mut ParamStore<f32>,
    model: &UnifiedModel,
    data: &[PreparedSample],
    stage: &StageConfig,
    rc: &RunConfig,
    eval_set: &[PreparedSample],
    mut on_log: impl FnMut(&StageLogRow),
) -> Result<StageOutcome> {
    let data: Vec<&PreparedSample> = if stage.stage == 3 {
        data.iter().filter(|p| p.expressive).collect()
    } else {
        data.iter().collect()
    };
    if data.is_empty() {
        return Err(Error::EmptyInput(format!("stage {} has no training data", stage.stage)));
    }
    store.set_trainable_within(always_frozen, |n| stage.trainable(n));
    let frozen_before = store.checksums_matching(|_| true);
    let frozen_names: Vec<String> = store
        .ids()
        .filter(|&id| !store.trainable(id))
        .map(|id| store.name(id).to_string())
        .collect();
    let steps = (stage.steps / rc.desk_scale).max(1);
    let warmup = ((steps as f64 * rc.warmup_frac) as usize).max(1);
    let mut opt = AdamW::new();
    let flow_eval_before = eval_flow_loss(store, model, eval_set, rc.seed ^ 0xe7a1)?;
    let mut rows = Vec::new();
    let noise_std = rc.noise.std();
    for step in 0..steps {
        let step_seed = rc.seed ^ (stage.stage as u64) << 56 ^ (step as u64).wrapping_mul(0x2545F4914F6CDD1D);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let batch: Vec<(usize, Task, u64)> = (0..rc.batch)
            .map(|b| {
                let idx = rng.random_range(0..data.len());
                let task = sample_task(&mut rng, stage);
                (idx, task, step_seed ^ ((b as u64 + 1) << 40))
            })
            .collect();
        let results: Vec<Result<(Gradients<f32>, [f64; 3])>> = batch
            .par_iter()
            .map(|&(idx, task, item_seed)| {
                let ps = data[idx];
                let task = if ps.caption_ids.is_empty() { Task::TextToMotion } else { task };
                let seq = assemble(&ps.caption_ids, &ps.latents, task)?;
                let mut irng = ChaCha8Rng::seed_from_u64(item_seed);
                let mut tape = Tape::new(store);
                let (total, parts) = item_loss(&mut tape, model, &seq, stage, noise_std, &mut irng)?;
                if parts.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss at stage {} step {step}",
                        stage.stage
                    )));
                }
                let grads = tape.backward(total)?;
                Ok((grads, parts))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut sums = [0.0f64; 3];
        for r in results {
            let (g, parts) = r?;
            grads.merge(g);
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        grads.scale(1.0 / rc.batch as f32);
        grads.clip_global_norm(rc.grad_clip);
        let lr_ar = lr_with_warmup(step, steps, stage.base_lr, stage.ar_schedule, warmup);
        let lr_head = lr_with_warmup(step, steps, stage.base_lr, stage.head_schedule, warmup);
        opt.step(store, &grads, |name| if is_ar_group(name) { lr_ar as f32 } else { lr_head as f32 }, 0.0)?;
        let bn = rc.batch as f64;
        let row = StageLogRow {
            stage: stage.stage,
            step,
            flow: sums[0] / bn,
            ntp: sums[1] / bn,
            end: sums[2] / bn,
            total: compose_objective(sums[0] / bn, sums[1] / bn, sums[2] / bn, stage),
            lr_ar,
            lr_head,
        };
        if step % rc.log_every == 0 || step + 1 == steps {
            on_log(&row);
            rows.push(row);
        }
    }
    // frozen-set violation check
    let after: std::collections::HashMap<String, u64> =
        store.checksums_matching(|_| true).into_iter().collect();
    for (name, before) in frozen_before {
        if frozen_names.contains(&name) && after.get(&name) != Some(&before) {
            return Err(Error::TrainingAborted(format!(
                "frozen tensor '{name}' changed during stage {}",
                stage.stage
            )));
        }
    }
    let flow_eval_after = eval_flow_loss(store, model, eval_set, rc.seed ^ 0xe7a1)?;
    Ok(StageOutcome { rows, flow_eval_before, flow_eval_after })
}

#[derive(Debug, Clone)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch: 8, lr: 3e-4, seed: 0, log_every: 50 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BaseLogRow {
    pub step: usize,
    pub ce: f64,
    pub lr: f64,
}

/// Pretrains the text branch as a small caption language model (the
/// artifact's stand-in for a pretrained base LLM). Only `text.*` tensors
/// train here.
pub fn train_base(
    store: &mut ParamStore<f32>,
    model: &UnifiedModel,
    captions: &[Vec<u32>],
    cfg: &BaseTrainConfig,
    mut on_log: impl FnMut(&BaseLogRow),
) -> Result<(f64, f64)> {
    if captions.is_empty() {
        return Err(Error::EmptyInput("no captions to pretrain on".into()));
    }
    store.set_frozen(|n| !n.starts_with("text."));
    let mut opt = AdamW::new();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..cfg.steps {
        let step_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..captions.len())).collect();
        let results: Vec<Result<(Gradients<f32>, f64)>> = picks
            .par_iter()
            .map(|&idx| {
                let ids = &captions[idx];
                let mut items = vec![Item::Text(crate::tokenizer::BOS)];
                items.extend(ids.iter().map(|&t| Item::Text(t)));
                let mut targets: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                targets.push(EOS as usize);
                let mut tape = Tape::new(store);
                let hidden = model.backbone.forward(&mut tape, &items, &model.adapter)?;
                let logits = model.backbone.lm_logits(&mut tape, &hidden);
                let ce = tape.cross_entropy_mean(logits, &targets);
                let v = tape.value(ce).scalar_value() as f64;
                let grads = tape.backward(ce)?;
                Ok((grads, v))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut acc = 0.0;
        for r in results {
            let (g, v) = r?;
            grads.merge(g);
            acc += v;
        }
        grads.scale(1.0 / cfg.batch as f32);
        grads.clip_global_norm(1.0);
        let lr = warmup_cosine_lr(step, cfg.steps, cfg.lr, (cfg.steps / 20).max(1));
        opt.step(store, &grads, |_| lr as f32, 0.0)?;
        let ce = acc / cfg.batch as f64;
        if !ce.is_finite() {
            return Err(Error::TrainingAborted(format!("non-finite base LM loss at step {step}")));
        }
        if first.is_none() {
            first = Some(ce);
        }
        last = ce;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            on_log(&BaseLogRow { step, ce, lr });
        }
    }
    Ok((first.unwrap_or(0.0), last))
}

/// Turns a text-pretrained model into the frozen base: clones the text
/// branch into the motion branch, seeds the `[BOM]`/`[EOM]` rows from the
/// embedding column mean, and freezes every `text.*` tensor.
pub fn finalize_base(store: &mut ParamStore<f32>, model: &UnifiedModel) {
    model.backbone.copy_text_branch_to_motion(store);
    model.backbone.init_special_rows_from_embedding_mean(store);
    model.backbone.freeze_text(store);
}
