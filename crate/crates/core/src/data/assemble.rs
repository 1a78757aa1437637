//! Interleaved-sequence assembly with loss masks.
//!
//! Text-to-motion: `[BOS] caption [BOM] z_1..z_T [EOM] [EOS]` with flow
//! targets at every position whose successor is a latent ([BOM] and
//! z_1..z_{T-1}) and an exit label of 1 only at the position producing z_T.
//! Motion-to-text: `[BOS] [BOM] z_1..z_T [EOM] caption [EOS]` with NTP
//! targets on the caption and `[EOS]`; no loss lands on motion positions.

use crate::backbone::{InterleavedSequence, Item, Task};
use crate::error::{Error, Result};
use crate::tokenizer::{BOM, BOS, EOM, EOS};

pub fn assemble(caption_ids: &[u32], latents: &[Vec<f32>], task: Task) -> Result<InterleavedSequence> {
    if caption_ids.is_empty() {
        return Err(Error::EmptyInput("caption has no tokens".into()));
    }
    if latents.is_empty() {
        return Err(Error::EmptyInput("motion has no latents".into()));
    }
    let t = latents.len();
    let mut items = Vec::new();
    let mut flow_targets = Vec::new();
    let mut ntp_targets = Vec::new();
    let mut exit_labels = Vec::new();
    match task {
        Task::TextToMotion => {
            items.push(Item::Text(BOS));
            items.extend(caption_ids.iter().map(|&id| Item::Text(id)));
            let bom_pos = items.len();
            items.push(Item::Text(BOM));
            for (ti, z) in latents.iter().enumerate() {
                // the position producing latent ti is [BOM] for ti=0, else z_{ti-1}
                let producer = bom_pos + ti;
                flow_targets.push((producer, z.clone()));
                exit_labels.push((producer, if ti == t - 1 { 1.0 } else { 0.0 }));
                items.push(Item::Motion(z.clone()));
            }
            items.push(Item::Text(EOM));
            items.push(Item::Text(EOS));
        }
        Task::MotionToText => {
            items.push(Item::Text(BOS));
            items.push(Item::Text(BOM));
            for z in latents {
                items.push(Item::Motion(z.clone()));
            }
            let eom_pos = items.len();
            items.push(Item::Text(EOM));
            ntp_targets.push((eom_pos, caption_ids[0]));
            for (i, &id) in caption_ids.iter().enumerate() {
                let pos = items.len();
                items.push(Item::Text(id));
                let next = caption_ids.get(i + 1).copied().unwrap_or(EOS);
                ntp_targets.push((pos, next));
            }
            items.push(Item::Text(EOS));
        }
    }
    Ok(InterleavedSequence { items, task, flow_targets, ntp_targets, exit_labels })
}

/// Recovers `(task, caption token count, latent count)` from the masks and
/// item layout; the parser oracle for mask consistency.
pub fn parse_structure(seq: &InterleavedSequence) -> Result<(Task, usize, usize)> {
    let motion: Vec<usize> = seq
        .items
        .iter()
        .enumerate()
        .filter(|(_, it)| matches!(it, Item::Motion(_)))
        .map(|(i, _)| i)
        .collect();
    if motion.is_empty() {
        return Err(Error::InvalidMotion("no motion run".into()));
    }
    let contiguous = motion.windows(2).all(|w| w[1] == w[0] + 1);
    if !contiguous {
        return Err(Error::InvalidMotion("motion run is not contiguous".into()));
    }
    let first = motion[0];
    let last = *motion.last().unwrap();
    let (bom_ok, eom_ok) = (
        matches!(seq.items[first - 1], Item::Text(id) if id == BOM),
        matches!(seq.items[last + 1], Item::Text(id) if id == EOM),
    );
    if !bom_ok || !eom_ok {
        return Err(Error::InvalidMotion("motion run not delimited by [BOM]/[EOM]".into()));
    }
    if !matches!(seq.items[0], Item::Text(id) if id == BOS) {
        return Err(Error::InvalidMotion("sequence must start with [BOS]".into()));
    }
    let task = if seq.flow_targets.is_empty() { Task::MotionToText } else { Task::TextToMotion };
    let caption_len = match task {
        Task::TextToMotion => first - 2,           // between BOS and BOM
        Task::MotionToText => seq.items.len() - (last + 2) - 1, // between EOM and EOS
    };
    // masks must agree with the layout
    match task {
        Task::TextToMotion => {
            if seq.flow_targets.len() != motion.len() || seq.exit_labels.len() != motion.len() {
                return Err(Error::InvalidMotion("flow/exit masks do not cover the motion run".into()));
            }
            for (k, &(pos, _)) in seq.flow_targets.iter().enumerate() {
                if pos != first - 1 + k {
                    return Err(Error::InvalidMotion(format!("flow target {k} at {pos}")));
                }
            }
            // the final latent (item `last`) is produced at the position
            // before it
            let ones: Vec<_> = seq.exit_labels.iter().filter(|&&(_, l)| l == 1.0).collect();
            if ones.len() != 1 || ones[0].0 != last - 1 {
                return Err(Error::InvalidMotion("exit label must be 1 exactly at the final producer".into()));
            }
            if !seq.ntp_targets.is_empty() {
                return Err(Error::InvalidMotion("t2m carries no NTP targets".into()));
            }
        }
        Task::MotionToText => {
            if seq.ntp_targets.len() != caption_len + 1 {
                return Err(Error::InvalidMotion("NTP mask must cover caption + EOS".into()));
            }
            if seq.ntp_targets.iter().any(|&(pos, _)| motion.contains(&pos)) {
                return Err(Error::InvalidMotion("NTP mask covers a motion position".into()));
            }
            if !seq.exit_labels.is_empty() || !seq.flow_targets.is_empty() {
                return Err(Error::InvalidMotion("m2t carries no flow/exit masks".into()));
            }
        }
    }
    Ok((task, caption_len, motion.len()))
}
