//! Brute-force oracles shared by the integration tests. Everything here is
//! written against the public API only and enumerates instead of sampling.

#![allow(dead_code)]

use std::collections::BTreeMap;

use clozevar::corpus::normalize_word;
use clozevar::tokenizer::DEFAULT_SPACE_MARKER;
use clozevar::{LmConfig, MergeTable, NextTokenModel, TinyLm, TokenId};

/// A small random model whose weights are stretched so next-token
/// distributions are far from uniform.
pub fn spiky_model(vocab: usize, config: LmConfig, seed: u64, stretch: f64) -> TinyLm {
    let mut m = TinyLm::init(vocab, config, seed).unwrap();
    m.params.scale(stretch);
    let n = m.params.b_out.len();
    for (i, b) in m.params.b_out.iter_mut().enumerate() {
        *b = ((i * 7 + seed as usize) % n) as f64 * 0.3 - 0.5;
    }
    m
}

/// `a`, `b`, marker, plus merges `Ġa` and `ab`: five tokens.
pub fn table_ab5() -> MergeTable {
    MergeTable::from_parts("ab ".chars(), &[("Ġ", "a"), ("a", "b")], DEFAULT_SPACE_MARKER).unwrap()
}

/// Seven tokens: `a b . Ġ` plus `Ġa`, `Ġb`, `ab`.
pub fn table_ab7() -> MergeTable {
    MergeTable::from_parts("ab .".chars(), &[("Ġ", "a"), ("Ġ", "b"), ("a", "b")], DEFAULT_SPACE_MARKER)
        .unwrap()
}

/// Every token path of exactly `len` steps after `ctx` with its probability.
pub fn all_paths<M: NextTokenModel>(model: &M, ctx: &[TokenId], len: usize) -> Vec<(Vec<TokenId>, f64)> {
    fn go<M: NextTokenModel>(
        model: &M,
        ctx: &mut Vec<TokenId>,
        path: &mut Vec<TokenId>,
        p: f64,
        left: usize,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) {
        if left == 0 {
            out.push((path.clone(), p));
            return;
        }
        let q = model.next_token_dist(ctx).unwrap();
        for (t, qt) in q.iter().enumerate() {
            ctx.push(t as TokenId);
            path.push(t as TokenId);
            go(model, ctx, path, p * qt, left - 1, out);
            ctx.pop();
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(model, &mut ctx.to_vec(), &mut Vec::new(), 1.0, len, &mut out);
    out
}

/// Probability of each surface word, summing every canonical token path of
/// up to `max_len` tokens whose text is a space followed by the word.
pub fn word_probs_by_enumeration<M: NextTokenModel>(
    model: &M,
    ctx: &[TokenId],
    table: &MergeTable,
    max_len: usize,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for len in 1..=max_len {
        for (path, p) in all_paths(model, ctx, len) {
            let text = table.decode(&path).unwrap();
            let Some(word) = text.strip_prefix(' ') else { continue };
            if word.is_empty() || word.contains(' ') {
                continue;
            }
            if table.encode(&text).unwrap().0 != path {
                continue;
            }
            *out.entry(word.to_string()).or_insert(0.0) += p;
        }
    }
    out
}

fn is_boundary(c: char) -> bool {
    c.is_whitespace() || ".,;:!?\"".contains(c)
}

/// The first word of `text` if a boundary character already follows it.
fn completed_word(text: &str) -> Option<String> {
    let body = text.trim_start_matches(is_boundary);
    let end = body.find(is_boundary)?;
    (end > 0).then(|| body[..end].to_string())
}

fn fragment_word(text: &str) -> String {
    let body = text.trim_start_matches(is_boundary);
    let raw = if body.is_empty() { text } else { body };
    let w = normalize_word(raw);
    if !w.is_empty() {
        return w;
    }
    let t = raw.trim();
    if t.is_empty() {
        "<empty>".to_string()
    } else {
        t.to_lowercase()
    }
}

/// Exact distribution of the word sliced from ancestral samples: a word is
/// complete once decoded text has a boundary character (a space from a
/// word-initial token, or punctuation) after word content; otherwise the
/// fragment after `max_tokens` draws is used.
pub fn exact_sliced_word_dist<M: NextTokenModel>(
    model: &M,
    ctx: &[TokenId],
    table: &MergeTable,
    max_tokens: usize,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((path, p)) = stack.pop() {
        let mut full = ctx.to_vec();
        full.extend(&path);
        let q = model.next_token_dist(&full).unwrap();
        for (t, qt) in q.iter().enumerate() {
            let mut next = path.clone();
            next.push(t as TokenId);
            let text = table.decode(&next).unwrap();
            if let Some(w) = completed_word(&text) {
                let w = {
                    let n = normalize_word(&w);
                    if n.is_empty() { w.trim().to_lowercase() } else { n }
                };
                *out.entry(w).or_insert(0.0) += p * qt;
            } else if next.len() == max_tokens {
                *out.entry(fragment_word(&text)).or_insert(0.0) += p * qt;
            } else {
                stack.push((next, p * qt));
            }
        }
    }
    out
}

pub fn tvd_maps(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}
