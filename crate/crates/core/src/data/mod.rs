//! Procedural motion+caption corpus, file formats, and sequence assembly.

pub mod assemble;
pub mod families;
pub mod io;

use crate::error::Result;
use crate::repr::{build_representation, GlobalPose, MotionSequence, Skeleton};
use families::{sample_params, MotionKind, ALL_KINDS};
use io::{ManifestRecord, Split};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub samples: usize,
    pub min_duration_s: f32,
    pub max_duration_s: f32,
    pub fps: f32,
    /// Every n-th sample lands in the validation split.
    pub val_every: usize,
    pub kinds: Vec<MotionKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            min_duration_s: 2.0,
            max_duration_s: 8.0,
            fps: 30.0,
            val_every: 10,
            kinds: ALL_KINDS.to_vec(),
        }
    }
}

/// One corpus sample kept in memory: manifest record, pose, features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: ManifestRecord,
    pub pose: GlobalPose,
    pub seq: MotionSequence,
}

/// Deterministic corpus: sample `i` draws from a seed-and-index keyed stream,
/// families round-robin.
pub fn generate_corpus(cfg: &CorpusConfig, skel: &Skeleton, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let kind = cfg.kinds[i % cfg.kinds.len()];
        let item_seed = seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let duration = rng.random_range(cfg.min_duration_s..cfg.max_duration_s);
        let params = sample_params(kind, duration, &mut rng);
        let (pose, caption) = families::generate_motion(kind, &params, item_seed, skel, cfg.fps);
        let seq = build_representation(&pose, skel)?;
        let split = if cfg.val_every > 0 && i % cfg.val_every == cfg.val_every - 1 { Split::Val } else { Split::Train };
        out.push(Sample {
            record: ManifestRecord {
                motion_path: format!("motions/{i:05}.m272"),
                caption,
                family: kind,
                params,
                split,
            },
            pose,
            seq,
        });
    }
    Ok(out)
}

/// Writes motions plus the manifest under `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        io::write_motion(&dir.join(&s.record.motion_path), &s.seq)?;
    }
    io::write_manifest(&dir.join("manifest.jsonl"), &samples.iter().map(|s| s.record.clone()).collect::<Vec<_>>())
}

/// Loads a corpus written by [`write_corpus`], recovering poses from the
/// stored representation.
pub fn read_corpus(dir: &Path, skel: &Skeleton) -> Result<Vec<Sample>> {
    let records = io::read_manifest(&dir.join("manifest.jsonl"))?;
    records
        .into_iter()
        .map(|record| {
            let seq = io::read_motion(&dir.join(&record.motion_path))?;
            let pose = crate::repr::recover_motion(&seq, skel)?;
            Ok(Sample { record, pose, seq })
        })
        .collect()
}

/// Drops a sample iff every end-effector stays below 5 cm/s across all
/// frames. Pure predicate: idempotent, order-independent.
pub fn filter_static(samples: &[Sample], skel: &Skeleton) -> Vec<Sample> {
    samples.iter().filter(|s| !families::is_static(&s.pose, skel)).cloned().collect()
}

pub fn train_split(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.record.split == Split::Train).cloned().collect()
}

pub fn val_split(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.record.split == Split::Val).cloned().collect()
}
