//! Byte-pair tokenizer trained on the caption corpus.
//!
//! Base vocabulary: five special tokens, then the 256 bytes. Merges are
//! learned per whitespace-delimited chunk (a leading space sticks to the
//! following word), so merges never cross word boundaries and specials are
//! never produced by merges. Decoding concatenates raw bytes, which makes
//! encode-decode the identity on any corpus text.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BOM: u32 = 3;
pub const EOM: u32 = 4;
const NUM_SPECIALS: u32 = 5;
const BYTE_BASE: u32 = NUM_SPECIALS;
const FIRST_MERGE: u32 = BYTE_BASE + 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Learned merges in rank order: (left id, right id) -> FIRST_MERGE + rank.
    merges: Vec<(u32, u32)>,
    max_vocab: usize,
    #[serde(skip)]
    merge_rank: HashMap<(u32, u32), u32>,
}

impl Tokenizer {
    /// Learns merges from the corpus until `max_vocab` ids exist or no pair
    /// repeats.
    pub fn train(corpus: &[String], max_vocab: usize) -> Self {
        assert!(max_vocab as u32 >= FIRST_MERGE, "max_vocab below base vocabulary");
        // chunk -> frequency
        let mut chunk_freq: HashMap<Vec<u32>, u64> = HashMap::new();
        for text in corpus {
            for chunk in split_chunks(text) {
                let ids: Vec<u32> = chunk.bytes().map(|b| BYTE_BASE + b as u32).collect();
                *chunk_freq.entry(ids).or_default() += 1;
            }
        }
        let mut chunks: Vec<(Vec<u32>, u64)> = chunk_freq.into_iter().collect();
        chunks.sort(); // deterministic order regardless of hash state
        let mut merges = Vec::new();
        while (FIRST_MERGE as usize + merges.len()) < max_vocab {
            let mut pair_count: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, freq) in &chunks {
                for w in ids.windows(2) {
                    *pair_count.entry((w[0], w[1])).or_default() += freq;
                }
            }
            let best = pair_count
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let new_id = FIRST_MERGE + merges.len() as u32;
            for (ids, _) in &mut chunks {
                apply_merge(ids, pair, new_id);
            }
            merges.push(pair);
        }
        let mut tok = Self { merges, max_vocab, merge_rank: HashMap::new() };
        tok.rebuild_rank();
        tok
    }

    fn rebuild_rank(&mut self) {
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, FIRST_MERGE + i as u32))
            .collect();
    }

    /// Total id space: specials + bytes + merges.
    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE as usize + self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in split_chunks(text) {
            let mut ids: Vec<u32> = chunk.bytes().map(|b| BYTE_BASE + b as u32).collect();
            loop {
                // lowest-rank applicable merge
                let mut best: Option<(u32, usize)> = None;
                for (i, w) in ids.windows(2).enumerate() {
                    if let Some(&rank) = self.merge_rank.get(&(w[0], w[1])) {
                        if best.map(|(r, _)| rank < r).unwrap_or(true) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((rank, _)) = best else { break };
                let pair = self.merges[(rank - FIRST_MERGE) as usize];
                apply_merge(&mut ids, pair, rank);
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenates token bytes; special ids contribute nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            self.push_bytes(id, &mut bytes);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn push_bytes(&self, id: u32, out: &mut Vec<u8>) {
        if id < BYTE_BASE {
            return;
        }
        if id < FIRST_MERGE {
            out.push((id - BYTE_BASE) as u8);
        } else if let Some(&(a, b)) = self.merges.get((id - FIRST_MERGE) as usize) {
            self.push_bytes(a, out);
            self.push_bytes(b, out);
        }
        // ids beyond the vocabulary decode to nothing
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tok: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if tok.vocab_size() > tok.max_vocab {
            return Err(Error::Tokenizer(format!(
                "vocabulary {} exceeds declared max {}",
                tok.vocab_size(),
                tok.max_vocab
            )));
        }
        tok.rebuild_rank();
        Ok(tok)
    }
}

fn apply_merge(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut i = 0;
    while i + 1 < ids.len() {
        if ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[i] = new_id;
            ids.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Splits into chunks of `[single leading space]word`; extra whitespace
/// becomes its own chunk. Concatenating the chunks restores the input.
fn split_chunks(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b' ' {
            if i > start {
                out.push(&text[start..i]);
            }
            // a single space glues to the following word
            let word_start = i;
            let mut j = i + 1;
            if j < bytes.len() && bytes[j] != b' ' {
                while j < bytes.len() && bytes[j] != b' ' {
                    j += 1;
                }
                out.push(&text[word_start..j]);
            } else {
                out.push(&text[i..i + 1]);
                j = i + 1;
            }
            start = j;
            i = j;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        out.push(&text[start..]);
    }
    out
}
