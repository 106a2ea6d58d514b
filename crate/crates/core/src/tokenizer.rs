//! Byte-level BPE tokenizer with reserved special tokens.
//!
//! Id layout: the five specials come first, then the 256 raw bytes, then learned
//! merges in rank order. Byte fallback makes every string encodable, so
//! `decode(encode(s)) == s` holds for arbitrary UTF-8.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const AGG: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
/// Smallest admissible vocabulary: specials plus one id per byte.
pub const MIN_VOCAB: usize = NUM_SPECIALS as usize + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() || c == '\'' || c == '’' {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Splits text into merge-isolated pieces: runs of one character class, where a
/// single space preceding a non-space run is attached to that run.
fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut j = i;
        if chars[j].1 == ' ' && j + 1 < chars.len() && class_of(chars[j + 1].1) != CharClass::Space {
            j += 1;
        }
        let class = class_of(chars[j].1);
        j += 1;
        while j < chars.len() && class_of(chars[j].1) == class {
            if class == CharClass::Space
                && chars[j].1 == ' '
                && j + 1 < chars.len()
                && class_of(chars[j + 1].1) != CharClass::Space
            {
                break;
            }
            j += 1;
        }
        let end = if j < chars.len() { chars[j].0 } else { text.len() };
        pieces.push(&text[start..end]);
        i = j;
    }
    pieces
}

fn byte_ids(piece: &str) -> Vec<u32> {
    piece.bytes().map(|b| BYTE_OFFSET + b as u32).collect()
}

/// Trained subword vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
    merges: Vec<(u32, u32)>,
    ranks: BTreeMap<(u32, u32), u32>,
    bytes: Vec<Vec<u8>>,
}

impl Tokenizer {
    /// Learns up to `vocab_size - MIN_VOCAB` merges from the corpus; the resulting
    /// vocabulary is smaller when merges run out.
    ///
    /// Merge selection is deterministic: highest pair frequency, ties broken by the
    /// smaller pair of ids. Training stops early if no pair occurs at least twice.
    pub fn train<'a, I>(corpus: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if vocab_size < MIN_VOCAB {
            return Err(Error::VocabTooSmall { requested: vocab_size, floor: MIN_VOCAB });
        }
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut any = false;
        for doc in corpus {
            any = true;
            for piece in pretokenize(doc) {
                *word_counts.entry(piece).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(Vec<u32>, u64)> =
            word_counts.into_iter().map(|(w, n)| (byte_ids(w), n)).collect();

        let mut pair_counts: BTreeMap<(u32, u32), i64> = BTreeMap::new();
        for (symbols, n) in &words {
            for pair in symbols.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_default() += *n as i64;
            }
        }

        let mut merges = Vec::new();
        let budget = vocab_size - MIN_VOCAB;
        while merges.len() < budget {
            let mut best: Option<((u32, u32), i64)> = None;
            for (&pair, &count) in &pair_counts {
                if count >= 2 && best.map_or(true, |(_, c)| count > c) {
                    best = Some((pair, count));
                }
            }
            let Some((pair, _)) = best else { break };
            let new_id = MIN_VOCAB as u32 + merges.len() as u32;
            merges.push(pair);
            for (symbols, n) in words.iter_mut() {
                if !symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                    continue;
                }
                let n = *n as i64;
                for w in symbols.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() -= n;
                }
                let mut merged = Vec::with_capacity(symbols.len());
                let mut k = 0;
                while k < symbols.len() {
                    if k + 1 < symbols.len() && symbols[k] == pair.0 && symbols[k + 1] == pair.1 {
                        merged.push(new_id);
                        k += 2;
                    } else {
                        merged.push(symbols[k]);
                        k += 1;
                    }
                }
                for w in merged.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() += n;
                }
                *symbols = merged;
            }
            pair_counts.retain(|_, c| *c > 0);
        }
        Self::from_merges(MIN_VOCAB + merges.len(), merges)
    }

    /// Rebuilds a tokenizer from its serialized merge list.
    pub fn from_merges(vocab_size: usize, merges: Vec<(u32, u32)>) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::VocabTooSmall { requested: vocab_size, floor: MIN_VOCAB });
        }
        if MIN_VOCAB + merges.len() > vocab_size {
            return Err(Error::Invalid(alloc::format!(
                "{} merges do not fit in vocabulary of {vocab_size}",
                merges.len()
            )));
        }
        let mut bytes: Vec<Vec<u8>> = Vec::with_capacity(MIN_VOCAB + merges.len());
        bytes.resize(NUM_SPECIALS as usize, Vec::new());
        for b in 0..=255u8 {
            bytes.push(alloc::vec![b]);
        }
        let mut ranks = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let id = bytes.len() as u32;
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= id || b >= id {
                return Err(Error::Invalid(alloc::format!("merge {rank} references invalid ids ({a}, {b})")));
            }
            let mut joined = bytes[a as usize].clone();
            joined.extend_from_slice(&bytes[b as usize]);
            bytes.push(joined);
            ranks.insert((a, b), rank as u32);
        }
        Ok(Tokenizer { vocab_size, merges, ranks, bytes })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Encodes plain text. Special ids are never produced.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            let mut symbols = byte_ids(piece);
            loop {
                let best = symbols
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                    .min();
                let Some((rank, _)) = best else { break };
                let pair = self.merges[rank as usize];
                let id = MIN_VOCAB as u32 + rank;
                let mut merged = Vec::with_capacity(symbols.len());
                let mut k = 0;
                while k < symbols.len() {
                    if k + 1 < symbols.len() && symbols[k] == pair.0 && symbols[k + 1] == pair.1 {
                        merged.push(id);
                        k += 2;
                    } else {
                        merged.push(symbols[k]);
                        k += 1;
                    }
                }
                symbols = merged;
            }
            out.extend(symbols);
        }
        out
    }

    /// Raw bytes of one token; empty for specials and out-of-range ids.
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        self.bytes.get(id as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Decodes ids to text. Special tokens render as nothing; invalid UTF-8 is
    /// replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut buf = Vec::new();
        for &id in ids {
            buf.extend_from_slice(self.token_bytes(id));
        }
        String::from_utf8_lossy(&buf).into_owned()
    }
}

/// Streaming detokenizer that only emits complete UTF-8 sequences, so the
/// concatenation of emitted pieces equals the full decode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IncrementalDecoder {
    pending: Vec<u8>,
}

impl IncrementalDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tokenizer: &Tokenizer, id: u32) -> String {
        self.pending.extend_from_slice(tokenizer.token_bytes(id));
        let mut out = String::new();
        loop {
            match core::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    return out;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(core::str::from_utf8(&self.pending[..valid]).unwrap_or_default());
                    match e.error_len() {
                        // Incomplete trailing sequence: keep it for the next token.
                        None => {
                            self.pending.drain(..valid);
                            return out;
                        }
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                    }
                }
            }
        }
    }

    /// Flushes any incomplete trailing bytes as replacement characters.
    pub fn finish(&mut self) -> String {
        let s = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        s
    }
}
