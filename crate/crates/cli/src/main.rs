//! `motley` command line: corpus generation, tokenizer and codec training,
//! the three-stage unified training drivers, streaming generation,
//! captioning, latency benchmarking, and evaluation.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use motley::backbone::ModelConfig;
use motley::codec::{Codec, CodecConfig, CodecTrainConfig};
use motley::data::io::Split;
use motley::data::{self, CorpusConfig};
use motley::eval::{bench, evaluate, evaluate_codec};
use motley::generate::{caption, generate_stream, CaptionOptions, GenerateOptions};
use motley::heads::FlowHeadConfig;
use motley::model::{load_codec, save_codec, UnifiedConfig, UnifiedModel};
use motley::num::ParamStore;
use motley::repr::Skeleton;
use motley::tokenizer::Tokenizer;
use motley::train::{
    finalize_base, prepare_samples, run_stage, train_base, BaseTrainConfig, NoiseConfig, RunConfig,
    StageConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "motley", version, about = "desk-scale unified motion-language model")]
struct Cli {
    /// Seed for anything stochastic in the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Optional key=value config file overriding training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic corpus tools.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Byte-pair tokenizer tools.
    Tokenizer {
        #[command(subcommand)]
        cmd: TokenizerCmd,
    },
    /// Motion codec tools.
    Codec {
        #[command(subcommand)]
        cmd: CodecCmd,
    },
    /// Training drivers (base text LM, then stages 1-3).
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Streaming text-to-motion generation.
    Generate(GenerateArgs),
    /// Motion-to-text captioning.
    Caption(CaptionArgs),
    /// Per-token latency benchmark.
    Bench(BenchArgs),
    /// Evaluation harness over a corpus split.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generates a procedural motion+caption corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 2.0)]
        min_duration: f32,
        #[arg(long, default_value_t = 8.0)]
        max_duration: f32,
    },
    /// Drops under-expressive sequences (all end-effectors under 5 cm/s).
    Filter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TokenizerCmd {
    /// Learns byte-pair merges from the corpus captions.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        vocab_size: usize,
    },
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Trains the causal VAE on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 96)]
        window: usize,
        #[arg(long, default_value_t = 32)]
        z_dim: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 0.01)]
        c_sigma: f32,
        #[arg(long, default_value_t = 5e-5)]
        base_lr: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_root: f32,
    },
    /// Encodes a motion file into latent means (JSON).
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decodes a latent JSON back into a motion file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction metrics on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Pretrains the text branch on captions and freezes it (the base
    /// checkpoint every stage builds on).
    Base {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    Stage1(StageArgs),
    Stage2(StageArgs),
    Stage3(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Checkpoint from the previous stage (or the base checkpoint).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Divides the recipe's full-scale step counts.
    #[arg(long, default_value_t = 100)]
    desk_scale: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Output motion file; a JSON sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_latents: usize,
    #[arg(long, default_value_t = 2)]
    min_latents: usize,
    #[arg(long, default_value_t = 0.5)]
    exit_threshold: f32,
    #[arg(long, default_value_t = 1.0)]
    guidance: f32,
    #[arg(long, default_value_t = 50)]
    flow_steps: usize,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    motion: PathBuf,
    #[arg(long, default_value_t = 48)]
    max_tokens: usize,
    /// 0 is greedy decoding.
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long, default_value = "a person walks forward at a steady pace")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[arg(long, default_value_t = 4)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    flow_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let overrides = match &cli.config {
        Some(p) => read_kv_config(p)?,
        None => BTreeMap::new(),
    };
    match cli.cmd {
        Cmd::Data { cmd } => run_data(cmd, cli.seed),
        Cmd::Tokenizer { cmd } => run_tokenizer(cmd),
        Cmd::Codec { cmd } => run_codec(cmd, cli.seed),
        Cmd::Train { cmd } => run_train(cmd, cli.seed, &overrides),
        Cmd::Generate(args) => run_generate(args, cli.seed),
        Cmd::Caption(args) => run_caption(args, cli.seed),
        Cmd::Bench(args) => run_bench(args, cli.seed),
        Cmd::Eval(args) => run_eval(args, cli.seed),
    }
}

fn read_kv_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect())
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<data::Sample>> {
    let skel = Skeleton::humanoid22();
    let all = data::read_corpus(dir, &skel)?;
    let want = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "all" => {
            return Ok(all);
        }
        other => bail!("unknown split '{other}' (train|val|all)"),
    };
    Ok(all.into_iter().filter(|s| s.record.split == want).collect())
}

fn run_data(cmd: DataCmd, seed: u64) -> Result<()> {
    let skel = Skeleton::humanoid22();
    match cmd {
        DataCmd::Gen { out, samples, min_duration, max_duration } => {
            let cfg = CorpusConfig {
                samples,
                min_duration_s: min_duration,
                max_duration_s: max_duration,
                ..Default::default()
            };
            let corpus = data::generate_corpus(&cfg, &skel, seed)?;
            data::write_corpus(&out, &corpus)?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
        }
        DataCmd::Filter { data: dir, out } => {
            let all = data::read_corpus(&dir, &skel)?;
            let kept = data::filter_static(&all, &skel);
            data::write_corpus(&out, &kept)?;
            println!("kept {} of {} samples ({} dropped as static)", kept.len(), all.len(), all.len() - kept.len());
        }
    }
    Ok(())
}

fn run_tokenizer(cmd: TokenizerCmd) -> Result<()> {
    match cmd {
        TokenizerCmd::Train { data: dir, out, vocab_size } => {
            let records = data::io::read_manifest(&dir.join("manifest.jsonl"))?;
            let captions: Vec<String> = records.into_iter().map(|r| r.caption).collect();
            let tok = Tokenizer::train(&captions, vocab_size);
            tok.save(&out)?;
            println!("trained tokenizer: vocab {} over {} captions -> {}", tok.vocab_size(), captions.len(), out.display());
        }
    }
    Ok(())
}

fn run_codec(cmd: CodecCmd, seed: u64) -> Result<()> {
    let skel = Skeleton::humanoid22();
    match cmd {
        CodecCmd::Train { data: dir, out, steps, batch, window, z_dim, width, c_sigma, base_lr, lambda_root } => {
            let samples = load_split(&dir, "train")?;
            if samples.is_empty() {
                bail!("no training samples in {}", dir.display());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let cfg = CodecConfig { z_dim, width, c_sigma, lambda_root, ..Default::default() };
            let codec = Codec::init(&mut store, cfg, &mut rng)?;
            let seqs: Vec<&motley::repr::MotionSequence> = samples.iter().map(|s| &s.seq).collect();
            codec.fit_stats(&mut store, &seqs);
            let tcfg = CodecTrainConfig { steps, batch, window, seed, base_lr, ..Default::default() };
            let log_path = out.with_extension("metrics.jsonl");
            let mut log_file = fs::File::create(&log_path)?;
            let outcome = motley::codec::train_codec(&mut store, &codec, &seqs, &tcfg, |row| {
                let line = serde_json::to_string(row).expect("log row");
                writeln!(log_file, "{line}").ok();
                println!("step {:>6}  total {:.5}  recon {:.5}  kl {:.4}  root {:.5}  lr {:.2e}", row.step, row.total, row.recon, row.kl, row.root, row.lr);
            })?;
            save_codec(&store, &codec, &out)?;
            println!(
                "codec saved to {} (recon {:.5} -> {:.5}); metrics in {}",
                out.display(),
                outcome.initial_recon,
                outcome.final_recon,
                log_path.display()
            );
        }
        CodecCmd::Encode { checkpoint, motion, out } => {
            let (store, codec) = load_codec(&checkpoint)?;
            let m = data::io::read_motion(&motion)?;
            let (mu, pad) = codec.encode_seq(&store, &m)?;
            let latents: Vec<Vec<f32>> = (0..mu.shape[0]).map(|r| mu.row(r).to_vec()).collect();
            let payload = serde_json::json!({
                "z_dim": codec.cfg.z_dim,
                "fps": m.fps,
                "orig_frames": m.frames(),
                "pad": pad,
                "latents": latents,
            });
            fs::write(&out, serde_json::to_string(&payload)?)?;
            println!("encoded {} frames -> {} latents ({})", m.frames(), mu.shape[0], out.display());
        }
        CodecCmd::Decode { checkpoint, latents, out } => {
            let (store, codec) = load_codec(&checkpoint)?;
            let payload: serde_json::Value = serde_json::from_str(&fs::read_to_string(&latents)?)?;
            let rows: Vec<Vec<f32>> = serde_json::from_value(payload["latents"].clone())?;
            let fps = payload["fps"].as_f64().unwrap_or(30.0) as f32;
            let pad = payload["pad"].as_u64().unwrap_or(0) as usize;
            if rows.is_empty() {
                bail!("no latents in {}", latents.display());
            }
            let z = codec.cfg.z_dim;
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let zt = motley::num::Tensor::new(vec![rows.len(), z], flat);
            let m = codec.decode_to_motion(&store, &zt, fps, pad);
            data::io::write_motion(&out, &m)?;
            println!("decoded {} latents -> {} frames ({})", rows.len(), m.frames(), out.display());
        }
        CodecCmd::Eval { checkpoint, data: dir, split, out } => {
            let (store, codec) = load_codec(&checkpoint)?;
            let samples = load_split(&dir, &split)?;
            let report = evaluate_codec(&store, &codec, &skel, &samples)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(p) = out {
                fs::write(&p, json)?;
            }
        }
    }
    Ok(())
}

fn effective_run_config(desk_scale: usize, batch: usize, seed: u64, over: &BTreeMap<String, String>) -> RunConfig {
    let mut rc = RunConfig { desk_scale, batch, seed, ..Default::default() };
    if let Some(v) = over.get("desk_scale").and_then(|v| v.parse().ok()) {
        rc.desk_scale = v;
    }
    if let Some(v) = over.get("batch").and_then(|v| v.parse().ok()) {
        rc.batch = v;
    }
    if let Some(v) = over.get("noise_value").and_then(|v| v.parse().ok()) {
        rc.noise = NoiseConfig { value: v, ..rc.noise };
    }
    if let Some(v) = over.get("noise_is_variance").and_then(|v| v.parse().ok()) {
        rc.noise = NoiseConfig { is_variance: v, ..rc.noise };
    }
    if let Some(v) = over.get("grad_clip").and_then(|v| v.parse().ok()) {
        rc.grad_clip = v;
    }
    rc
}

/// Writes the effective stage + run configuration as key=value text.
fn write_run_config(path: &Path, stage: &StageConfig, rc: &RunConfig) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("stage={}\n", stage.stage));
    s.push_str(&format!("base_lr={}\n", stage.base_lr));
    s.push_str(&format!("ar_schedule={:?}\n", stage.ar_schedule));
    s.push_str(&format!("head_schedule={:?}\n", stage.head_schedule));
    s.push_str(&format!("lambda_ce={}\n", stage.lambda_ce));
    s.push_str(&format!("lambda_bce={}\n", stage.lambda_bce));
    s.push_str(&format!("steps={}\n", stage.steps));
    s.push_str(&format!("t2m_ratio={}\n", stage.t2m_ratio));
    s.push_str(&format!("m2t_ratio={}\n", stage.m2t_ratio));
    s.push_str(&format!("desk_scale={}\n", rc.desk_scale));
    s.push_str(&format!("batch={}\n", rc.batch));
    s.push_str(&format!("seed={}\n", rc.seed));
    s.push_str(&format!("noise_value={}\n", rc.noise.value));
    s.push_str(&format!("noise_is_variance={}\n", rc.noise.is_variance));
    s.push_str(&format!("grad_clip={}\n", rc.grad_clip));
    s.push_str(&format!("warmup_frac={}\n", rc.warmup_frac));
    fs::write(path, s)?;
    Ok(())
}

fn run_train(cmd: TrainCmd, seed: u64, over: &BTreeMap<String, String>) -> Result<()> {
    let skel = Skeleton::humanoid22();
    match cmd {
        TrainCmd::Base { data: dir, tokenizer, codec, out, steps, batch } => {
            let samples = load_split(&dir, "train")?;
            let tok = Tokenizer::load(&tokenizer)?;
            let (codec_store, trained_codec) = load_codec(&codec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let vocab = tok.vocab_size().next_multiple_of(64);
            let cfg = UnifiedConfig {
                model: ModelConfig { vocab, ..Default::default() },
                flow: FlowHeadConfig::default(),
                codec: trained_codec.cfg,
            };
            let model = UnifiedModel::init(&mut store, cfg, &mut rng)?;
            motley::model::adopt_codec_weights(&mut store, &codec_store)?;
            let captions: Vec<Vec<u32>> = samples.iter().map(|s| tok.encode(&s.record.caption)).collect();
            let bcfg = BaseTrainConfig { steps, batch, seed, ..Default::default() };
            let (first, last) = train_base(&mut store, &model, &captions, &bcfg, |row| {
                println!("base step {:>6}  ce {:.4}  lr {:.2e}", row.step, row.ce, row.lr);
            })?;
            finalize_base(&mut store, &model);
            model.save(&store, &out)?;
            println!("base checkpoint saved to {} (ce {first:.3} -> {last:.3})", out.display());
        }
        TrainCmd::Stage1(a) => run_one_stage(1, a, seed, over, &skel)?,
        TrainCmd::Stage2(a) => run_one_stage(2, a, seed, over, &skel)?,
        TrainCmd::Stage3(a) => run_one_stage(3, a, seed, over, &skel)?,
    }
    Ok(())
}

fn run_one_stage(stage_id: u8, a: StageArgs, seed: u64, over: &BTreeMap<String, String>, skel: &Skeleton) -> Result<()> {
    let (mut store, model) = UnifiedModel::load(&a.checkpoint)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let samples = load_split(&a.data, "train")?;
    let prepared = prepare_samples(&store, &model, &tok, skel, &samples)?;
    let stage = StageConfig::table(stage_id);
    let rc = effective_run_config(a.desk_scale, a.batch, seed, over);
    write_run_config(&a.out.with_extension("run.cfg"), &stage, &rc)?;
    let log_path = a.out.with_extension("metrics.jsonl");
    let mut log_file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let eval_set: Vec<_> = prepared.iter().take(32).cloned().collect();
    let outcome = run_stage(&mut store, &model, &prepared, &stage, &rc, &eval_set, |row| {
        let line = serde_json::to_string(row).expect("log row");
        writeln!(log_file, "{line}").ok();
        println!(
            "stage {} step {:>6}  flow {:.4}  ntp {:.4}  end {:.4}  lr_ar {:.2e} lr_head {:.2e}",
            row.stage, row.step, row.flow, row.ntp, row.end, row.lr_ar, row.lr_head
        );
    })?;
    model.save(&store, &a.out)?;
    println!(
        "stage {stage_id} done: flow eval {:.4} -> {:.4}; checkpoint {}",
        outcome.flow_eval_before,
        outcome.flow_eval_after,
        a.out.display()
    );
    Ok(())
}

fn run_generate(a: GenerateArgs, seed: u64) -> Result<()> {
    let (store, model) = UnifiedModel::load(&a.checkpoint)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let opts = GenerateOptions {
        max_latents: a.max_latents,
        min_latents: a.min_latents,
        exit_threshold: a.exit_threshold,
        guidance: a.guidance,
        flow_steps: a.flow_steps,
        seed,
        ..Default::default()
    };
    let mut blocks = 0usize;
    let run = generate_stream(&store, &model, &tok, &a.prompt, opts, |i, block| {
        blocks = i + 1;
        eprintln!("block {i}: {} frames", block.len());
    })?;
    data::io::write_motion(&a.out, &run.motion)?;
    let sidecar = a.out.with_extension("json");
    let payload = serde_json::json!({
        "prompt": a.prompt,
        "seed": seed,
        "latent_count": run.latent_count,
        "stopped_by_exit": run.stopped_by_exit,
        "frames": run.motion.frames(),
        "token_latencies_ms": run.token_latencies,
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&payload)?)?;
    println!(
        "generated {} frames ({} latents, exit={}) -> {} (+ {})",
        run.motion.frames(),
        run.latent_count,
        run.stopped_by_exit,
        a.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn run_caption(a: CaptionArgs, seed: u64) -> Result<()> {
    let (store, model) = UnifiedModel::load(&a.checkpoint)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let m = data::io::read_motion(&a.motion)?;
    let r = caption(&store, &model, &tok, &m, CaptionOptions { max_tokens: a.max_tokens, temperature: a.temperature, seed })?;
    if r.truncated {
        eprintln!("warning: caption truncated at {} tokens", a.max_tokens);
    }
    println!("{}", r.text);
    Ok(())
}

fn run_bench(a: BenchArgs, seed: u64) -> Result<()> {
    let (store, model) = UnifiedModel::load(&a.checkpoint)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let report = bench(&store, &model, &tok, &a.prompt, a.tokens, a.warmup, a.flow_steps, seed)?;
    print!("{}", report.table());
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = a.out {
        fs::write(&p, json)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let (store, model) = UnifiedModel::load(&a.checkpoint)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let skel = Skeleton::humanoid22();
    let samples = load_split(&a.data, &a.split)?;
    let report = evaluate(&store, &model, &tok, &skel, &samples, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = a.out {
        fs::write(&p, json)?;
    }
    Ok(())
}
