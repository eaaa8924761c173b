//! Byte-level BPE tokenizer with atomic special tokens.
//!
//! The base alphabet is all 256 bytes, so any UTF-8 input encodes without
//! unknown tokens. Training merges the most frequent adjacent symbol pair
//! (ties broken by lexicographic order of the pair bytes) until the target
//! vocabulary size is reached or no pair occurs at least twice. Special
//! tokens sit outside training: they are never produced by merges and are
//! matched verbatim before BPE runs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

const VOCAB_FILE_VERSION: u32 = 1;
const N_BYTES: usize = 256;

/// The reserved special tokens, in id order after the merge table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Usr,
    Sys,
    Question,
    Answer,
    CarryOver,
    Eoa,
    Pad,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 7] = [
        SpecialToken::Usr,
        SpecialToken::Sys,
        SpecialToken::Question,
        SpecialToken::Answer,
        SpecialToken::CarryOver,
        SpecialToken::Eoa,
        SpecialToken::Pad,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            SpecialToken::Usr => "[usr]",
            SpecialToken::Sys => "[sys]",
            SpecialToken::Question => "question:",
            SpecialToken::Answer => "answer:",
            SpecialToken::CarryOver => "[carryover]",
            SpecialToken::Eoa => "[eoa]",
            SpecialToken::Pad => "[pad]",
        }
    }
}

/// Surface string emitted for a carried-over slot value.
pub const CARRYOVER_SURFACE: &str = "[carryover]";

/// Trained vocabulary: byte alphabet, ordered merges, specials.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// id -> byte string. Layout: 256 bytes, then one entry per merge,
    /// then the special tokens.
    token_bytes: Vec<Vec<u8>>,
    /// Ordered merges; merge `i` produces id `256 + i`.
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
    special_base: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    merges: Vec<(u32, u32)>,
    specials: Vec<String>,
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

/// Split text into chunks that merges never cross: words with an attached
/// leading space, plus residual whitespace runs. Every input byte lands in
/// exactly one chunk.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if is_ws(text[i]) {
            let mut j = i;
            while j < text.len() && is_ws(text[j]) {
                j += 1;
            }
            if j < text.len() && text[j - 1] == b' ' {
                // give the final space to the word that follows
                if j - 1 > i {
                    chunks.push(&text[i..j - 1]);
                }
                let mut k = j;
                while k < text.len() && !is_ws(text[k]) {
                    k += 1;
                }
                chunks.push(&text[j - 1..k]);
                i = k;
            } else {
                chunks.push(&text[i..j]);
                i = j;
            }
        } else {
            let mut j = i;
            while j < text.len() && !is_ws(text[j]) {
                j += 1;
            }
            chunks.push(&text[i..j]);
            i = j;
        }
    }
    chunks
}

impl Tokenizer {
    /// Train on a text stream. `vocab_size` counts bytes, merges, and
    /// specials together and must leave room for at least one merge.
    pub fn train<I, S>(texts: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let floor = N_BYTES + SpecialToken::ALL.len();
        if vocab_size < floor + 1 {
            return Err(Error::InvalidInput(format!(
                "vocab_size {vocab_size} below minimum {}",
                floor + 1
            )));
        }

        // Chunk frequency table.
        let mut chunk_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut any_text = false;
        for text in texts {
            let text = text.as_ref();
            if !text.is_empty() {
                any_text = true;
            }
            for chunk in pretokenize(text.as_bytes()) {
                *chunk_counts.entry(chunk.to_vec()).or_insert(0) += 1;
            }
        }
        if !any_text {
            return Err(Error::InvalidInput("empty training corpus".into()));
        }

        let mut token_bytes: Vec<Vec<u8>> = (0..N_BYTES).map(|b| vec![b as u8]).collect();
        // Words as symbol sequences, deterministically ordered.
        let mut words: Vec<(Vec<u32>, u64)> = {
            let mut v: Vec<_> = chunk_counts.into_iter().collect();
            v.sort();
            v.into_iter()
                .map(|(bytes, n)| (bytes.iter().map(|&b| b as u32).collect(), n))
                .collect()
        };

        let special_surfaces: Vec<&[u8]> = SpecialToken::ALL
            .iter()
            .map(|s| s.surface().as_bytes())
            .collect();
        let max_merges = vocab_size - floor;
        let mut merges = Vec::new();

        while merges.len() < max_merges {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts.entry((pair[0], pair[1])).or_insert(0) += n;
                }
            }

            // Most frequent pair; ties by lexicographic order of the pair's
            // byte strings. Pairs whose merge would collide with a special
            // surface are never selected.
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &pair_counts {
                if count < 2 {
                    continue;
                }
                let mut merged = token_bytes[pair.0 as usize].clone();
                merged.extend_from_slice(&token_bytes[pair.1 as usize]);
                if special_surfaces.iter().any(|s| *s == merged.as_slice()) {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bp, bc)) => {
                        count > *bc
                            || (count == *bc
                                && pair_key(&token_bytes, pair) < pair_key(&token_bytes, *bp))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }

            let Some((pair, _)) = best else { break };
            let new_id = token_bytes.len() as u32;
            let mut merged = token_bytes[pair.0 as usize].clone();
            merged.extend_from_slice(&token_bytes[pair.1 as usize]);
            token_bytes.push(merged);
            merges.push(pair);

            for (symbols, _) in &mut words {
                apply_merge(symbols, pair, new_id);
            }
        }

        Ok(Self::assemble(token_bytes, merges))
    }

    fn assemble(mut token_bytes: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Self {
        let special_base = token_bytes.len() as u32;
        for special in SpecialToken::ALL {
            token_bytes.push(special.surface().as_bytes().to_vec());
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, &pair)| (pair, i as u32))
            .collect();
        Tokenizer {
            token_bytes,
            merges,
            merge_rank,
            special_base,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn special_id(&self, special: SpecialToken) -> u32 {
        let offset = SpecialToken::ALL
            .iter()
            .position(|s| *s == special)
            .unwrap();
        self.special_base + offset as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.special_base && (id as usize) < self.token_bytes.len()
    }

    pub fn pad_id(&self) -> u32 {
        self.special_id(SpecialToken::Pad)
    }

    /// Encode text. Substrings matching a special surface become that
    /// special id; everything else goes through byte-level BPE.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut segment_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            match self.match_special(&bytes[i..]) {
                Some((special, len)) => {
                    self.encode_segment(&bytes[segment_start..i], &mut ids);
                    ids.push(self.special_id(special));
                    i += len;
                    segment_start = i;
                }
                None => i += 1,
            }
        }
        self.encode_segment(&bytes[segment_start..], &mut ids);
        ids
    }

    fn match_special(&self, rest: &[u8]) -> Option<(SpecialToken, usize)> {
        // Longest surface first so no special can shadow a longer one.
        let mut specials = SpecialToken::ALL;
        specials.sort_by_key(|s| std::cmp::Reverse(s.surface().len()));
        for special in specials {
            let surface = special.surface().as_bytes();
            if rest.starts_with(surface) {
                return Some((special, surface.len()));
            }
        }
        None
    }

    fn encode_segment(&self, segment: &[u8], out: &mut Vec<u32>) {
        for chunk in pretokenize(segment) {
            let mut symbols: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
            loop {
                // lowest-rank applicable merge
                let mut best: Option<(u32, usize)> = None;
                for (i, pair) in symbols.windows(2).enumerate() {
                    if let Some(&rank) = self.merge_rank.get(&(pair[0], pair[1])) {
                        if best.map_or(true, |(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((rank, _)) = best else { break };
                let pair = self.merges[rank as usize];
                apply_merge(&mut symbols, pair, N_BYTES as u32 + rank);
            }
            out.extend(symbols);
        }
    }

    /// Decode ids back to text by concatenating token byte strings.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self
                .token_bytes
                .get(id as usize)
                .ok_or(Error::InvalidToken {
                    id,
                    vocab_size: self.vocab_size(),
                })?;
            bytes.extend_from_slice(token);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self.to_json()?;
        std::fs::write(path, data).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&data)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            merges: self.merges.clone(),
            specials: SpecialToken::ALL
                .iter()
                .map(|s| s.surface().to_string())
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(data: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(data)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(Error::VocabVersion {
                found: file.version,
                expected: VOCAB_FILE_VERSION,
            });
        }
        let mut token_bytes: Vec<Vec<u8>> = (0..N_BYTES).map(|b| vec![b as u8]).collect();
        for &(a, b) in &file.merges {
            if a as usize >= token_bytes.len() || b as usize >= token_bytes.len() {
                return Err(Error::InvalidInput(format!(
                    "merge ({a}, {b}) references unknown ids"
                )));
            }
            let mut merged = token_bytes[a as usize].clone();
            merged.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(merged);
        }
        Ok(Self::assemble(token_bytes, file.merges))
    }

    /// Stable content hash of the vocabulary, embedded in checkpoints.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let json = self.to_json()?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.into())
    }
}

fn pair_key(token_bytes: &[Vec<u8>], pair: (u32, u32)) -> (Vec<u8>, Vec<u8>) {
    (
        token_bytes[pair.0 as usize].clone(),
        token_bytes[pair.1 as usize].clone(),
    )
}

fn apply_merge(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            symbols[i] = new_id;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}
