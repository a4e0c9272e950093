//! Byte-pair-style subword tokenizer over characters.
//!
//! Spaces are folded into a marker character that prefixes the following
//! symbol, so word-initial tokens are distinguishable from word-internal ones
//! (`"Ġcat"` vs `"cat"`). Before merging, text is cut into pre-token chunks:
//! each marker starts a chunk, and a chunk never mixes alphanumerics, other
//! whitespace (newlines, tabs) and punctuation. Merges never cross chunks.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SPACE_MARKER: char = 'Ġ';
pub const DEFAULT_NUM_MERGES: usize = 512;

pub type TokenId = u32;

/// A sequence of token ids into a [`MergeTable`] vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    alphabet: Vec<String>,
    merges: Vec<[String; 2]>,
    space_marker: String,
}

/// Ordered merge list plus the base alphabet it applies to.
///
/// Token ids: `0..alphabet.len()` are single symbols in sorted order, then one
/// id per merge in merge order.
#[derive(Debug, Clone)]
pub struct MergeTable {
    alphabet: Vec<char>,
    merges: Vec<(TokenId, TokenId)>,
    space_marker: char,
    tokens: Vec<String>,
    token_index: HashMap<String, TokenId>,
    char_index: HashMap<char, TokenId>,
    // (left, right) -> (rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl MergeTable {
    fn build(alphabet: Vec<char>, space_marker: char) -> Self {
        let tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let token_index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let char_index = alphabet
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as TokenId))
            .collect();
        MergeTable {
            alphabet,
            merges: Vec::new(),
            space_marker,
            tokens,
            token_index,
            char_index,
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let merged = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let id = self.tokens.len() as TokenId;
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        self.token_index.insert(merged.clone(), id);
        self.tokens.push(merged);
        id
    }

    /// Character-level table (no merges) over the given alphabet.
    pub fn char_level(alphabet: impl IntoIterator<Item = char>, space_marker: char) -> Self {
        let set: BTreeSet<char> = alphabet
            .into_iter()
            .map(|c| if c == ' ' { space_marker } else { c })
            .collect();
        Self::build(set.into_iter().collect(), space_marker)
    }

    /// Builds a table from explicit merges given as token strings (marker form).
    pub fn from_parts(
        alphabet: impl IntoIterator<Item = char>,
        merges: &[(&str, &str)],
        space_marker: char,
    ) -> Result<Self> {
        let mut table = Self::char_level(alphabet, space_marker);
        for (l, r) in merges {
            table.add_merge_str(l, r)?;
        }
        Ok(table)
    }

    fn add_merge_str(&mut self, l: &str, r: &str) -> Result<()> {
        let left = *self
            .token_index
            .get(l)
            .ok_or_else(|| Error::InvalidMergeTable(format!("unknown left token {l:?}")))?;
        let right = *self
            .token_index
            .get(r)
            .ok_or_else(|| Error::InvalidMergeTable(format!("unknown right token {r:?}")))?;
        if self.token_index.contains_key(&format!("{l}{r}")) {
            return Err(Error::InvalidMergeTable(format!("duplicate token {l}{r:?}")));
        }
        if self.ranks.contains_key(&(left, right)) {
            return Err(Error::InvalidMergeTable(format!("duplicate merge ({l:?}, {r:?})")));
        }
        self.push_merge(left, right);
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn space_marker(&self) -> char {
        self.space_marker
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Merge pairs as token strings, in application order.
    pub fn merges(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|(l, r)| (self.tokens[*l as usize].clone(), self.tokens[*r as usize].clone()))
            .collect()
    }

    /// Raw token text, with the space marker left in place.
    pub fn token_str(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidToken { id, vocab: self.vocab_size() })
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_index.get(token).copied()
    }

    /// True when the token begins with the space marker, i.e. opens a new word.
    pub fn starts_word(&self, id: TokenId) -> bool {
        self.tokens
            .get(id as usize)
            .is_some_and(|t| t.starts_with(self.space_marker))
    }

    fn symbols(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                if c == self.space_marker {
                    return Err(Error::OutOfAlphabet(c));
                }
                let c = if c == ' ' { self.space_marker } else { c };
                self.char_index.get(&c).copied().ok_or(Error::OutOfAlphabet(c))
            })
            .collect()
    }

    fn encode_chunk(&self, chunk: &mut Vec<TokenId>) {
        loop {
            let best = chunk
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (r.0, (w[0], w[1]), r.1)))
                .min_by_key(|(rank, _, _)| *rank);
            let Some((_, (l, r), merged)) = best else { break };
            let mut out = Vec::with_capacity(chunk.len());
            let mut i = 0;
            while i < chunk.len() {
                if i + 1 < chunk.len() && chunk[i] == l && chunk[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(chunk[i]);
                    i += 1;
                }
            }
            *chunk = out;
        }
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let symbols = self.symbols(text)?;
        let mut out = Vec::with_capacity(symbols.len());
        for mut chunk in split_chunks(&symbols, self) {
            self.encode_chunk(&mut chunk);
            out.extend(chunk);
        }
        Ok(TokenSeq(out))
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in tokens {
            for c in self.token_str(id)?.chars() {
                s.push(if c == self.space_marker { ' ' } else { c });
            }
        }
        Ok(s)
    }

    /// Canonical tokenization of a word as it appears after a prefix: one
    /// leading space.
    pub fn tokenize_word(&self, word: &str) -> Result<TokenSeq> {
        if word.is_empty() {
            return Err(Error::EmptyWord);
        }
        self.encode(&format!(" {word}"))
    }

    pub fn to_json(&self) -> String {
        let raw = RawTable {
            alphabet: self.alphabet.iter().map(|c| c.to_string()).collect(),
            merges: self.merges().into_iter().map(|(l, r)| [l, r]).collect(),
            space_marker: self.space_marker.to_string(),
        };
        serde_json::to_string_pretty(&raw).expect("merge table serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: RawTable = serde_json::from_str(json)?;
        let single = |s: &str| -> Result<char> {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::InvalidMergeTable(format!("{s:?} is not a single character"))),
            }
        };
        let marker = single(&raw.space_marker)?;
        let alphabet = raw.alphabet.iter().map(|s| single(s)).collect::<Result<Vec<_>>>()?;
        let sorted: BTreeSet<char> = alphabet.iter().copied().collect();
        if sorted.len() != alphabet.len() || !alphabet.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidMergeTable("alphabet must be sorted and unique".into()));
        }
        let mut table = Self::build(alphabet, marker);
        for [l, r] in &raw.merges {
            table.add_merge_str(l, r)?;
        }
        Ok(table)
    }

    /// Hex SHA-256 of the canonical JSON form; checkpoints pin this.
    pub fn vocab_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Marker,
    Word,
    Blank,
    Other,
}

fn class_of(c: char, marker: char) -> Class {
    if c == marker {
        Class::Marker
    } else if c.is_alphanumeric() {
        Class::Word
    } else if c.is_whitespace() {
        Class::Blank
    } else {
        Class::Other
    }
}

fn split_chunks(symbols: &[TokenId], table: &MergeTable) -> Vec<Vec<TokenId>> {
    let mut chunks: Vec<Vec<TokenId>> = Vec::new();
    let mut prev: Option<Class> = None;
    for &s in symbols {
        let c = table.tokens[s as usize].chars().next().expect("non-empty token");
        let class = class_of(c, table.space_marker);
        let joins = match (prev, class) {
            (None, _) | (_, Class::Marker) => false,
            (Some(Class::Marker), k) => k != Class::Blank,
            (Some(p), k) => p == k,
        };
        if !joins {
            chunks.push(Vec::new());
        }
        chunks.last_mut().expect("chunk pushed").push(s);
        prev = Some(class);
    }
    chunks
}

/// Learns up to `num_merges` merges from `corpus_text` with the default marker.
pub fn train_merges(corpus_text: &str, num_merges: usize) -> Result<MergeTable> {
    train_merges_with_marker(corpus_text, num_merges, DEFAULT_SPACE_MARKER)
}

/// Greedy BPE training. Each round merges the most frequent adjacent pair,
/// ties broken by the lexicographically smallest merged string (then the
/// smallest left token). Pairs whose merged text already exists as a token are
/// skipped so token strings stay unique. Stops early when no pair remains.
pub fn train_merges_with_marker(
    corpus_text: &str,
    num_merges: usize,
    space_marker: char,
) -> Result<MergeTable> {
    if corpus_text.is_empty() {
        return Err(Error::EmptyTrainingText);
    }
    if corpus_text.contains(space_marker) {
        return Err(Error::OutOfAlphabet(space_marker));
    }
    let mut table = MergeTable::char_level(corpus_text.chars(), space_marker);
    let symbols = table.symbols(corpus_text)?;

    let mut freq: HashMap<Vec<TokenId>, usize> = HashMap::new();
    for chunk in split_chunks(&symbols, &table) {
        *freq.entry(chunk).or_default() += 1;
    }
    let mut chunks: Vec<(Vec<TokenId>, usize)> = freq.into_iter().collect();
    chunks.sort();

    while table.num_merges() < num_merges {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (chunk, n) in &chunks {
            for w in chunk.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter_map(|((l, r), n)| {
                let merged = format!("{}{}", table.tokens[l as usize], table.tokens[r as usize]);
                (!table.token_index.contains_key(&merged)).then_some((n, merged, l, r))
            })
            .min_by(|a, b| {
                b.0.cmp(&a.0)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| table.tokens[a.2 as usize].cmp(&table.tokens[b.2 as usize]))
            });
        let Some((_, _, l, r)) = best else { break };
        let id = table.push_merge(l, r);
        for (chunk, _) in chunks.iter_mut() {
            if chunk.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(chunk.len());
            let mut i = 0;
            while i < chunk.len() {
                if i + 1 < chunk.len() && chunk[i] == l && chunk[i + 1] == r {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(chunk[i]);
                    i += 1;
                }
            }
            *chunk = out;
        }
    }
    Ok(table)
}
