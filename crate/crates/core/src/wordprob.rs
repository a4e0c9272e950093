//! Word-level probabilities and word-level sampling on top of a token model.

use rand::Rng;

use crate::corpus::normalize_word;
use crate::error::{Error, Result};
use crate::lm::{sample_next_token, NextTokenModel};
use crate::tokenizer::{MergeTable, TokenId};

pub const DEFAULT_MAX_TOKENS: usize = 16;

/// Placeholder word for a sampled fragment with no word characters at all.
pub const EMPTY_FRAGMENT: &str = "<empty>";

/// Probability of emitting exactly `tokens` after `context`: the product of
/// the per-step conditionals.
pub fn token_path_prob<M>(model: &M, context: &[TokenId], tokens: &[TokenId]) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let mut seq = context.to_vec();
    let mut prob = 1.0;
    for &t in tokens {
        let q = model.next_token_dist(&seq)?;
        let p = *q
            .get(t as usize)
            .ok_or(Error::InvalidToken { id: t, vocab: q.len() })?;
        prob *= p;
        seq.push(t);
    }
    Ok(prob)
}

/// q(w | c): chain product over the canonical tokenization of `word`.
pub fn word_prob<M>(model: &M, context: &[TokenId], word: &str, table: &MergeTable) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let tokens = table.tokenize_word(word)?;
    token_path_prob(model, context, tokens.as_slice())
}

/// A word sliced from an ancestrally sampled continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSample {
    /// Every token drawn, including the one that opened the next word.
    pub tokens: Vec<TokenId>,
    pub word: String,
    /// Number of leading tokens of `tokens` that make up the sliced word.
    pub boundary: usize,
    pub truncated: bool,
}

fn is_boundary_char(c: char) -> bool {
    c.is_whitespace() || matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"')
}

/// Byte range of the first word in `text`: `(start, end)` where `end` is set
/// once a boundary character follows word content.
fn first_word_span(text: &str) -> (Option<usize>, Option<usize>) {
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (start, is_boundary_char(c)) {
            (None, false) => start = Some(i),
            (Some(_), true) => return (start, Some(i)),
            _ => {}
        }
    }
    (start, None)
}

fn finish_word(fragment: &str) -> String {
    let w = normalize_word(fragment);
    if !w.is_empty() {
        return w;
    }
    let raw = fragment.trim();
    if raw.is_empty() {
        EMPTY_FRAGMENT.to_string()
    } else {
        raw.to_lowercase()
    }
}

/// Samples tokens until the first word of the continuation is complete and
/// returns it normalized.
///
/// The word closes when a word-initial token follows word content, or when the
/// decoded text has whitespace or sentence punctuation after word content.
/// Leading whitespace and punctuation are skipped. After `max_tokens` draws the
/// fragment so far is used and `truncated` is set.
pub fn sample_word<M, R>(
    model: &M,
    context: &[TokenId],
    table: &MergeTable,
    max_tokens: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<WordSample>
where
    M: NextTokenModel + ?Sized,
    R: Rng + ?Sized,
{
    if max_tokens == 0 {
        return Err(Error::InvalidConfig("max_tokens must be >= 1".into()));
    }
    let mut seq = context.to_vec();
    let mut tokens = Vec::new();
    let mut text = String::new();
    while tokens.len() < max_tokens {
        let t = sample_next_token(model, &seq, temperature, rng)?;
        let (start, _) = first_word_span(&text);
        if let Some(start) = start {
            if table.starts_word(t) {
                let boundary = tokens.len();
                tokens.push(t);
                return Ok(WordSample {
                    word: finish_word(&text[start..]),
                    tokens,
                    boundary,
                    truncated: false,
                });
            }
        }
        tokens.push(t);
        seq.push(t);
        text.push_str(&table.decode(&[t])?);
        if let (Some(start), Some(end)) = first_word_span(&text) {
            return Ok(WordSample {
                word: finish_word(&text[start..end]),
                boundary: tokens.len(),
                tokens,
                truncated: false,
            });
        }
    }
    let fragment = match first_word_span(&text) {
        (Some(start), _) => &text[start..],
        (None, _) => text.as_str(),
    };
    Ok(WordSample { word: finish_word(fragment), boundary: tokens.len(), tokens, truncated: true })
}
