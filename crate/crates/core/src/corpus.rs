//! Multi-reference cloze data: loading, empirical human distributions, and the
//! training-set variants built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '"', '\''];

/// Lowercase, trim whitespace, strip trailing sentence punctuation and quotes.
pub fn normalize_word(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .trim_end_matches(TRAILING_PUNCT)
        .trim()
        .to_string()
}

/// Human next-word references for one context, as word -> count.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationMultiset(BTreeMap<String, u32>);

impl AnnotationMultiset {
    /// Counts already-normalized words. Empty strings are ignored.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut m = BTreeMap::new();
        for w in words {
            let w = w.as_ref();
            if !w.is_empty() {
                *m.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        AnnotationMultiset(m)
    }

    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        AnnotationMultiset(
            counts
                .into_iter()
                .filter(|(_, c)| *c > 0)
                .map(|(w, c)| (w.into(), c))
                .collect(),
        )
    }

    /// Total number of annotation instances, M.
    pub fn total(&self) -> usize {
        self.0.values().map(|&c| c as usize).sum()
    }

    pub fn count(&self, word: &str) -> u32 {
        self.0.get(word).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.0.iter().map(|(w, c)| (w.as_str(), *c))
    }

    /// One entry per annotation instance, lexicographic order.
    pub fn expand(&self) -> Vec<&str> {
        self.0
            .iter()
            .flat_map(|(w, &c)| std::iter::repeat_n(w.as_str(), c as usize))
            .collect()
    }

    pub fn merged(&self, other: &AnnotationMultiset) -> AnnotationMultiset {
        let mut m = self.0.clone();
        for (w, c) in &other.0 {
            *m.entry(w.clone()).or_insert(0) += c;
        }
        AnnotationMultiset(m)
    }
}

/// A normalized categorical distribution over words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpd(BTreeMap<String, f64>);

impl Cpd {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates that `probs` is a distribution with strictly positive entries.
    pub fn new(probs: BTreeMap<String, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        let mut sum = 0.0;
        for (w, &p) in &probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidDistribution(format!("p({w:?}) = {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Cpd(probs))
    }

    /// Normalizes non-negative weights; zero weights are dropped from the support.
    pub fn from_weights<I, S>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for (w, x) in weights {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidDistribution(format!("weight {x}")));
            }
            if x > 0.0 {
                *m.entry(w.into()).or_insert(0.0) += x;
            }
        }
        let total: f64 = m.values().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        m.values_mut().for_each(|p| *p /= total);
        Cpd::new(m)
    }

    pub fn point_mass(word: impl Into<String>) -> Self {
        Cpd(BTreeMap::from([(word.into(), 1.0)]))
    }

    pub fn prob(&self, word: &str) -> f64 {
        self.0.get(word).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(w, p)| (w.as_str(), *p))
    }

    pub fn support(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Relative frequencies of the annotations.
pub fn empirical_cpd(w: &AnnotationMultiset) -> Result<Cpd> {
    let m = w.total();
    if m == 0 {
        return Err(Error::InvalidDistribution("no annotations".into()));
    }
    Ok(Cpd(w.iter().map(|(word, c)| (word.to_string(), f64::from(c) / m as f64)).collect()))
}

/// Most frequent annotation; ties go to the lexicographically smallest word.
pub fn majority_label(w: &AnnotationMultiset) -> Option<&str> {
    // BTreeMap iterates in lexicographic order and max_by_key keeps the last
    // maximum, so reverse to keep the first.
    w.0.iter()
        .rev()
        .max_by_key(|(_, c)| **c)
        .map(|(word, _)| word.as_str())
}

/// Uniform sample without replacement of `min(k, M)` annotation instances.
pub fn subsample_labels(w: &AnnotationMultiset, k: usize, seed: u64) -> AnnotationMultiset {
    let all = w.expand();
    if k >= all.len() {
        return w.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, all.len(), k);
    AnnotationMultiset::from_words(picked.iter().map(|i| all[i]))
}

/// Shuffles annotation instances and splits them into halves of sizes
/// `ceil(M/2)` and `floor(M/2)`.
pub fn oracle_split(
    w: &AnnotationMultiset,
    seed: u64,
) -> Result<(AnnotationMultiset, AnnotationMultiset)> {
    let mut all = w.expand();
    if all.len() < 2 {
        return Err(Error::CannotSplit(all.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let cut = all.len().div_ceil(2);
    Ok((
        AnnotationMultiset::from_words(&all[..cut]),
        AnnotationMultiset::from_words(&all[cut..]),
    ))
}

/// One context of a cloze dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClozeItem {
    pub context_id: String,
    pub passage_id: String,
    pub context: String,
    pub corpus_word: String,
    pub annotations: AnnotationMultiset,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_id: Option<String>,
    passage_id: String,
    context: String,
    corpus_word: String,
    annotations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClozeDataset {
    pub items: Vec<ClozeItem>,
}

impl ClozeDataset {
    pub fn new(items: Vec<ClozeItem>) -> Self {
        ClozeDataset { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Passage ids in order of first appearance.
    pub fn passages(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.items
            .iter()
            .map(|it| it.passage_id.as_str())
            .filter(|p| seen.insert(*p))
            .collect()
    }

    fn filter_passages(&self, keep: &BTreeSet<&str>) -> ClozeDataset {
        ClozeDataset::new(
            self.items
                .iter()
                .filter(|it| keep.contains(it.passage_id.as_str()))
                .cloned()
                .collect(),
        )
    }

    pub fn from_jsonl_str(text: &str, origin: &Path) -> Result<Self> {
        let mut items = Vec::new();
        let mut per_passage: BTreeMap<String, usize> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |msg: String| Error::Malformed {
                path: origin.to_path_buf(),
                line: lineno,
                msg,
            };
            let rec: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if rec.context.trim().is_empty() {
                return Err(malformed("empty context".into()));
            }
            let corpus_word = normalize_word(&rec.corpus_word);
            if corpus_word.is_empty() {
                return Err(malformed("empty corpus_word".into()));
            }
            let idx = per_passage.entry(rec.passage_id.clone()).or_insert(0);
            let context_id = rec
                .context_id
                .unwrap_or_else(|| format!("{}-{:03}", rec.passage_id, idx));
            *idx += 1;
            let annotations =
                AnnotationMultiset::from_words(rec.annotations.iter().map(|a| normalize_word(a)));
            if annotations.total() == 0 {
                return Err(Error::EmptyAnnotations(format!("{context_id} (line {lineno})")));
            }
            items.push(ClozeItem {
                context_id,
                passage_id: rec.passage_id,
                context: rec.context,
                corpus_word,
                annotations,
            });
        }
        Ok(ClozeDataset::new(items))
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let rec = Record {
                context_id: Some(it.context_id.clone()),
                passage_id: it.passage_id.clone(),
                context: it.context.clone(),
                corpus_word: it.corpus_word.clone(),
                annotations: it.annotations.expand().into_iter().map(String::from).collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl_string().as_bytes())?;
        Ok(())
    }

    /// All text a tokenizer for this dataset must cover: contexts followed by
    /// each reference word, plus the rendered prompt when a template is given.
    pub fn text_for_tokenizer(&self, template: Option<&PromptTemplate>) -> String {
        let mut s = String::new();
        for it in &self.items {
            if let Some(t) = template {
                s.push_str(&t.render(&it.context));
                s.push(' ');
                s.push_str(&it.corpus_word);
                s.push('\n');
            }
            s.push_str(&it.context);
            s.push(' ');
            s.push_str(&it.corpus_word);
            s.push('\n');
            for (w, c) in it.annotations.iter() {
                for _ in 0..c {
                    s.push_str(&it.context);
                    s.push(' ');
                    s.push_str(w);
                    s.push('\n');
                }
            }
        }
        s
    }
}

pub fn load_cloze_dataset(path: &Path) -> Result<ClozeDataset> {
    let text = fs::read_to_string(path)?;
    ClozeDataset::from_jsonl_str(&text, path)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ClozeDataset,
    pub val: ClozeDataset,
    pub test: ClozeDataset,
}

/// Partitions passages into train/val/test. `train_frac` of passages (rounded
/// half up) go to training; `val_frac_of_train` of those become validation.
pub fn split_by_paragraph(
    ds: &ClozeDataset,
    train_frac: f64,
    val_frac_of_train: f64,
    seed: u64,
) -> Result<Splits> {
    for f in [train_frac, val_frac_of_train] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("split fraction {f} not in (0,1)")));
        }
    }
    let mut passages = ds.passages();
    if passages.len() < 3 {
        return Err(Error::TooFewPassages(passages.len()));
    }
    passages.sort_unstable();
    let mut rng = seed::stream(seed, Purpose::Split, 0);
    passages.shuffle(&mut rng);

    let n_train = round_half_up(train_frac * passages.len() as f64).min(passages.len());
    let n_val = round_half_up(val_frac_of_train * n_train as f64).min(n_train);
    let (val, rest) = passages.split_at(n_val);
    let (train, test) = rest.split_at(n_train - n_val);
    fn set<'a>(s: &[&'a str]) -> BTreeSet<&'a str> {
        s.iter().copied().collect()
    }
    Ok(Splits {
        train: ds.filter_passages(&set(train)),
        val: ds.filter_passages(&set(val)),
        test: ds.filter_passages(&set(test)),
    })
}

pub const CONTEXT_PLACEHOLDER: &str = "<CONTEXT>";
pub const DEFAULT_PROMPT: &str = "Instruction: Return one plausible next word for the following context. Context: <CONTEXT> Continuation:";

/// Instruction prompt with a single context placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
    placeholder: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, placeholder: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate { text: text.into(), placeholder: placeholder.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.placeholder.is_empty() {
            return Err(Error::InvalidTemplate("empty context placeholder".into()));
        }
        match self.text.matches(self.placeholder.as_str()).count() {
            1 => Ok(()),
            n => Err(Error::InvalidTemplate(format!(
                "placeholder {:?} occurs {n} times",
                self.placeholder
            ))),
        }
    }

    pub fn render(&self, context: &str) -> String {
        self.text.replacen(self.placeholder.as_str(), context, 1)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { text: DEFAULT_PROMPT.into(), placeholder: CONTEXT_PLACEHOLDER.into() }
    }
}

/// How a context is turned into conditioning text for the model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextFormat {
    #[default]
    Plain,
    Instruction { template: PromptTemplate },
}

impl ContextFormat {
    pub fn render(&self, context: &str) -> String {
        match self {
            ContextFormat::Plain => context.to_string(),
            ContextFormat::Instruction { template } => template.render(context),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionPair {
    pub context_id: String,
    pub prompt: String,
    pub response: String,
}

/// One (prompt, response) pair per annotation instance.
pub fn augment_instruction_pairs(
    ds: &ClozeDataset,
    template: &PromptTemplate,
) -> Result<Vec<InstructionPair>> {
    template.validate()?;
    let mut out = Vec::new();
    for it in &ds.items {
        let prompt = template.render(&it.context);
        for w in it.annotations.expand() {
            out.push(InstructionPair {
                context_id: it.context_id.clone(),
                prompt: prompt.clone(),
                response: w.to_string(),
            });
        }
    }
    Ok(out)
}
