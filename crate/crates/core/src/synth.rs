//! Synthetic cloze worlds with known next-word distributions.
//!
//! Each context gets a true distribution drawn from a symmetric Dirichlet over
//! a fixed vocabulary of made-up two-syllable words. Small concentrations give
//! near-deterministic contexts, large ones near-uniform contexts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationMultiset, ClozeDataset, ClozeItem, Cpd};
use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";
pub const PASSAGE_BLOCK: usize = 5;
const PREFIX_WORDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthContext {
    pub id: String,
    pub prefix: String,
    pub truth: Cpd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub words: Vec<String>,
    pub contexts: Vec<SynthContext>,
    pub alpha: f64,
    pub seed: u64,
}

fn syllables() -> Vec<String> {
    let mut out = Vec::new();
    for c in CONSONANTS.chars() {
        for v in VOWELS.chars() {
            out.push(format!("{c}{v}"));
        }
    }
    out
}

/// The `i`-th vocabulary word. Distinct for `i < n_syllables²`.
fn vocab_word(syl: &[String], i: usize) -> String {
    let n = syl.len();
    let a = i % n;
    let b = (7 * a + i / n + 3) % n;
    format!("{}{}", syl[a], syl[b])
}

/// One draw from a symmetric Dirichlet, computed in log space so that tiny
/// concentrations do not underflow every component to zero.
fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let g = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let x: f64 = g.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            x.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn context_id(i: usize) -> String {
    format!("c{i:04}")
}

pub fn gen_world(num_contexts: usize, vocab_size: usize, alpha: f64, seed: u64) -> Result<SyntheticWorld> {
    let syl = syllables();
    if vocab_size < 2 || vocab_size > syl.len() * syl.len() {
        return Err(Error::InvalidConfig(format!("vocab_size {vocab_size} out of range")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} must be > 0")));
    }
    let max_prefixes = syl.len().pow(PREFIX_WORDS as u32);
    if num_contexts > max_prefixes {
        return Err(Error::InvalidConfig(format!("at most {max_prefixes} contexts")));
    }
    let words: Vec<String> = (0..vocab_size).map(|i| vocab_word(&syl, i)).collect();

    let mut rng = seed::stream(seed, Purpose::World, 0);
    let mut seen = BTreeSet::new();
    let mut contexts = Vec::with_capacity(num_contexts);
    for i in 0..num_contexts {
        let prefix = loop {
            let p: Vec<&str> = (0..PREFIX_WORDS)
                .map(|_| syl[rng.random_range(0..syl.len())].as_str())
                .collect();
            let p = p.join(" ");
            if seen.insert(p.clone()) {
                break p;
            }
        };
        let probs = dirichlet(alpha, vocab_size, &mut rng);
        let truth = Cpd::from_weights(words.iter().cloned().zip(probs))?;
        contexts.push(SynthContext { id: context_id(i), prefix, truth });
    }
    Ok(SyntheticWorld { words, contexts, alpha, seed })
}

fn draw<R: Rng + ?Sized>(truth: &Cpd, rng: &mut R) -> String {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = "";
    for (w, p) in truth.iter() {
        acc += p;
        last = w;
        if u < acc {
            return w.to_string();
        }
    }
    last.to_string()
}

impl SyntheticWorld {
    pub fn context(&self, id: &str) -> Option<&SynthContext> {
        self.contexts.iter().find(|c| c.id == id)
    }

    pub fn truth_map(&self) -> BTreeMap<String, Cpd> {
        self.contexts.iter().map(|c| (c.id.clone(), c.truth.clone())).collect()
    }
}

/// `m` i.i.d. draws from the true distribution of context `ctx`.
pub fn sample_annotations(world: &SyntheticWorld, ctx: &str, m: usize, seed: u64) -> Result<AnnotationMultiset> {
    if m == 0 {
        return Err(Error::InvalidConfig("M must be >= 1".into()));
    }
    let c = world
        .context(ctx)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown context {ctx}")))?;
    let mut rng = seed::keyed_stream(seed, Purpose::Annotations, ctx);
    Ok(AnnotationMultiset::from_words((0..m).map(|_| draw(&c.truth, &mut rng))))
}

/// One item per context; the corpus word is an extra draw from the truth.
pub fn to_cloze_dataset(world: &SyntheticWorld, m: usize, seed: u64) -> Result<ClozeDataset> {
    let mut items = Vec::with_capacity(world.contexts.len());
    for (i, c) in world.contexts.iter().enumerate() {
        let annotations = sample_annotations(world, &c.id, m, seed)?;
        // a separate stream so the corpus word does not shift the annotations
        let mut rng = seed::keyed_stream(seed ^ 0x00c0_5e55, Purpose::Annotations, &c.id);
        items.push(ClozeItem {
            context_id: c.id.clone(),
            passage_id: format!("p{:03}", i / PASSAGE_BLOCK),
            context: c.prefix.clone(),
            corpus_word: draw(&c.truth, &mut rng),
            annotations,
        });
    }
    Ok(ClozeDataset::new(items))
}

pub fn write_truth(world: &SyntheticWorld, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&world.truth_map())?)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<String, Cpd>> {
    let map: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(&fs::read_to_string(path)?)?;
    map.into_iter().map(|(k, v)| Ok((k, Cpd::new(v)?))).collect()
}
