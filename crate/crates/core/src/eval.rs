//! Comparing model and human next-word distributions.
//!
//! Model CPDs are Monte-Carlo estimates from sliced word samples; human CPDs
//! are annotation relative frequencies. Per-context rows feed CSV reports and
//! per-seed aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{empirical_cpd, normalize_word, oracle_split, AnnotationMultiset, ClozeDataset, ContextFormat, Cpd};
use crate::error::{Error, Result};
use crate::lm::NextTokenModel;
use crate::seed::{self, Purpose};
use crate::tokenizer::{MergeTable, TokenId};
use crate::wordprob::{sample_word, DEFAULT_MAX_TOKENS};

pub const DEFAULT_N_SAMPLES: usize = 40;

/// Half the L1 distance over the union of supports.
pub fn tvd(p: &Cpd, q: &Cpd) -> f64 {
    let support: BTreeSet<&str> = p.support().chain(q.support()).collect();
    let sum: f64 = support.iter().map(|w| (p.prob(w) - q.prob(w)).abs()).sum();
    (0.5 * sum).clamp(0.0, 1.0)
}

/// Shannon entropy in nats.
pub fn entropy(p: &Cpd) -> f64 {
    -p.iter().filter(|(_, x)| *x > 0.0).map(|(_, x)| x * x.ln()).sum::<f64>()
}

/// Fraction of distinct human words that the model also produced.
pub fn unique_word_coverage(human: &AnnotationMultiset, model_words: &BTreeSet<String>) -> f64 {
    let support: Vec<&str> = human.support().collect();
    if support.is_empty() {
        return 0.0;
    }
    let hit = support.iter().filter(|w| model_words.contains(**w)).count();
    hit as f64 / support.len() as f64
}

/// TVD between the empirical CPDs of two disjoint halves of the annotations.
pub fn oracle_tvd(w: &AnnotationMultiset, seed: u64) -> Result<f64> {
    let (a, b) = oracle_split(w, seed)?;
    Ok(tvd(&empirical_cpd(&a)?, &empirical_cpd(&b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_samples: DEFAULT_N_SAMPLES, max_tokens: DEFAULT_MAX_TOKENS, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub cpd: Cpd,
    pub truncations: usize,
}

/// Relative frequencies of `n_samples` sliced words after `context`,
/// reproducible for a given `seed`.
pub fn mc_estimate_model_cpd<M>(
    model: &M,
    context: &[TokenId],
    table: &MergeTable,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<McEstimate>
where
    M: NextTokenModel + ?Sized,
{
    if cfg.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    let mut rng = seed::stream(seed, Purpose::Sampling, 0);
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut truncations = 0;
    for _ in 0..cfg.n_samples {
        let s = sample_word(model, context, table, cfg.max_tokens, cfg.temperature, &mut rng)?;
        truncations += usize::from(s.truncated);
        *counts.entry(s.word).or_insert(0.0) += 1.0;
    }
    Ok(McEstimate { cpd: Cpd::from_weights(counts)?, truncations })
}

/// Fraction of sampled words equal to the normalized `target`.
pub fn hit_rate<M>(
    model: &M,
    context: &[TokenId],
    target: &str,
    table: &MergeTable,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let est = mc_estimate_model_cpd(model, context, table, cfg, seed)?;
    Ok(est.cpd.prob(&normalize_word(target)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextMetrics {
    pub seed: u64,
    pub context_id: String,
    pub tvd_model_human: f64,
    /// `None` when the context has fewer than two annotations.
    pub tvd_oracle: Option<f64>,
    pub model_entropy: f64,
    pub human_entropy: f64,
    pub unique_word_coverage: f64,
    pub n_model_samples: usize,
    pub truncation_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub n_seeds: usize,
}

impl Aggregate {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Aggregate { mean: f64::NAN, sd: f64::NAN, n_seeds: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, sd, n_seeds: n }
    }
}

pub const METRICS: [&str; 6] = [
    "tvd_model_human",
    "tvd_oracle",
    "model_entropy",
    "human_entropy",
    "unique_word_coverage",
    "truncation_count",
];

fn metric_value(row: &ContextMetrics, metric: &str) -> Option<f64> {
    match metric {
        "tvd_model_human" => Some(row.tvd_model_human),
        "tvd_oracle" => row.tvd_oracle,
        "model_entropy" => Some(row.model_entropy),
        "human_entropy" => Some(row.human_entropy),
        "unique_word_coverage" => Some(row.unique_word_coverage),
        "truncation_count" => Some(row.truncation_count as f64),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    pub rows: Vec<ContextMetrics>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "seed",
        "context_id",
        "tvd_model_human",
        "tvd_oracle",
        "model_entropy",
        "human_entropy",
        "unique_word_coverage",
        "n_model_samples",
        "truncation_count",
    ];

    /// Mean of a metric over the rows of one seed (null oracle rows skipped).
    pub fn seed_mean(&self, seed: u64, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.seed == seed)
            .filter_map(|r| metric_value(r, metric))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-seed means, then mean and SD across seeds.
    pub fn aggregate(&self, metric: &str) -> Aggregate {
        let per_seed: Vec<f64> = self.seeds.iter().filter_map(|&s| self.seed_mean(s, metric)).collect();
        Aggregate::from_values(&per_seed)
    }

    pub fn summary(&self) -> BTreeMap<String, Aggregate> {
        METRICS.iter().map(|m| (m.to_string(), self.aggregate(m))).collect()
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.context_id.clone(),
                r.tvd_model_human.to_string(),
                r.tvd_oracle.map(|x| x.to_string()).unwrap_or_default(),
                r.model_entropy.to_string(),
                r.human_entropy.to_string(),
                r.unique_word_coverage.to_string(),
                r.n_model_samples.to_string(),
                r.truncation_count.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        let mut seeds = Vec::new();
        let bad = |line: usize, msg: String| Error::Malformed { path: "<report>".into(), line, msg };
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            if rec.len() != Self::CSV_HEADER.len() {
                return Err(bad(line, format!("expected {} fields", Self::CSV_HEADER.len())));
            }
            let f = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|e| bad(line, format!("{}: {e}", Self::CSV_HEADER[j])))
            };
            let u = |j: usize| -> Result<u64> {
                rec[j].parse::<u64>().map_err(|e| bad(line, format!("{}: {e}", Self::CSV_HEADER[j])))
            };
            let seed = u(0)?;
            if !seeds.contains(&seed) {
                seeds.push(seed);
            }
            rows.push(ContextMetrics {
                seed,
                context_id: rec[1].to_string(),
                tvd_model_human: f(2)?,
                tvd_oracle: if rec[3].is_empty() { None } else { Some(f(3)?) },
                model_entropy: f(4)?,
                human_entropy: f(5)?,
                unique_word_coverage: f(6)?,
                n_model_samples: u(7)? as usize,
                truncation_count: u(8)? as usize,
            });
        }
        let n_samples = rows.first().map_or(0, |r| r.n_model_samples);
        Ok(EvalReport { seeds, n_samples, rows })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Per-context means across seeds, keyed by context id.
    fn per_context(&self) -> BTreeMap<&str, (f64, Option<f64>)> {
        let mut acc: BTreeMap<&str, (f64, f64, usize, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(&r.context_id).or_insert((0.0, 0.0, 0, 0));
            e.0 += r.tvd_model_human;
            e.2 += 1;
            if let Some(o) = r.tvd_oracle {
                e.1 += o;
                e.3 += 1;
            }
        }
        acc.into_iter()
            .map(|(k, (t, o, n, no))| (k, (t / n as f64, (no > 0).then(|| o / no as f64))))
            .collect()
    }
}

/// Metrics for one context under one (seed, model) run.
fn context_metrics<M>(
    model: &M,
    seed: u64,
    context_id: &str,
    context_tokens: &[TokenId],
    annotations: &AnnotationMultiset,
    table: &MergeTable,
    cfg: &SamplingConfig,
) -> Result<ContextMetrics>
where
    M: NextTokenModel + ?Sized,
{
    let sample_seed = seed::derive(seed, Purpose::Sampling, seed::hash_key(context_id));
    let est = mc_estimate_model_cpd(model, context_tokens, table, cfg, sample_seed)?;
    let human = empirical_cpd(annotations)?;
    let tvd_oracle = if annotations.total() >= 2 {
        Some(oracle_tvd(annotations, seed::derive(seed, Purpose::Oracle, seed::hash_key(context_id)))?)
    } else {
        None
    };
    let model_words: BTreeSet<String> = est.cpd.support().map(String::from).collect();
    Ok(ContextMetrics {
        seed,
        context_id: context_id.to_string(),
        tvd_model_human: tvd(&est.cpd, &human),
        tvd_oracle,
        model_entropy: entropy(&est.cpd),
        human_entropy: entropy(&human),
        unique_word_coverage: unique_word_coverage(annotations, &model_words),
        n_model_samples: cfg.n_samples,
        truncation_count: est.truncations,
    })
}

/// Evaluates each `(seed, model)` run on every test context. Random streams
/// are keyed by `(seed, context_id)`, so results do not depend on context order
/// or on parallel scheduling.
pub fn evaluate<M>(
    runs: &[(u64, &M)],
    test: &ClozeDataset,
    table: &MergeTable,
    format: &ContextFormat,
    cfg: &SamplingConfig,
) -> Result<EvalReport>
where
    M: NextTokenModel + Sync + ?Sized,
{
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no seeds to evaluate".into()));
    }
    let contexts: Vec<Vec<TokenId>> = test
        .items
        .iter()
        .map(|it| table.encode(&format.render(&it.context)).map(|s| s.0))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(runs.len() * test.len());
    for &(seed, model) in runs {
        let part: Vec<Result<ContextMetrics>> = test
            .items
            .par_iter()
            .zip(contexts.par_iter())
            .map(|(it, ctx)| {
                context_metrics(model, seed, &it.context_id, ctx, &it.annotations, table, cfg)
            })
            .collect();
        for r in part {
            rows.push(r?);
        }
    }
    Ok(EvalReport { seeds: runs.iter().map(|(s, _)| *s).collect(), n_samples: cfg.n_samples, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub context_id: String,
    /// `tvd_after - tvd_before`; negative means the later model is closer to humans.
    pub tvd_delta: f64,
    pub tvd_oracle: Option<f64>,
}

/// Per-context TVD change between two reports (seed-averaged).
pub fn report_compare(before: &EvalReport, after: &EvalReport) -> Result<Vec<DeltaRow>> {
    let b = before.per_context();
    let a = after.per_context();
    let kb: BTreeSet<&&str> = b.keys().collect();
    let ka: BTreeSet<&&str> = a.keys().collect();
    if kb != ka {
        let missing: Vec<&&&str> = kb.symmetric_difference(&ka).take(5).collect();
        return Err(Error::MismatchedContexts(format!("e.g. {missing:?}")));
    }
    // keep the order of the `after` report's first seed
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in &after.rows {
        if !seen.insert(r.context_id.as_str()) {
            continue;
        }
        let (ta, oa) = a[r.context_id.as_str()];
        let (tb, ob) = b[r.context_id.as_str()];
        out.push(DeltaRow { context_id: r.context_id.clone(), tvd_delta: ta - tb, tvd_oracle: oa.or(ob) });
    }
    Ok(out)
}

pub fn deltas_to_csv(rows: &[DeltaRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["context_id", "tvd_delta", "tvd_oracle"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.context_id.clone(),
            r.tvd_delta.to_string(),
            r.tvd_oracle.map(|x| x.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// A single-answer probe item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    #[serde(default)]
    pub id: Option<String>,
    pub context: String,
    pub target: String,
}

pub fn load_qa(path: &Path) -> Result<Vec<QaItem>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut item: QaItem = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if item.id.is_none() {
            item.id = Some(format!("qa-{:03}", out.len()));
        }
        out.push(item);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub seed: u64,
    pub item_id: String,
    pub target: String,
    pub hit_rate: f64,
}

/// Hit rate of every probe item under every `(seed, model)` run.
pub fn probe_hit_rates<M>(
    runs: &[(u64, &M)],
    items: &[QaItem],
    table: &MergeTable,
    format: &ContextFormat,
    cfg: &SamplingConfig,
) -> Result<Vec<HitRow>>
where
    M: NextTokenModel + Sync + ?Sized,
{
    let mut out = Vec::new();
    for &(seed, model) in runs {
        let part: Vec<Result<HitRow>> = items
            .par_iter()
            .map(|it| {
                let id = it.id.clone().unwrap_or_default();
                let ctx = table.encode(&format.render(&it.context))?;
                let s = seed::derive(seed, Purpose::Sampling, seed::hash_key(&id));
                Ok(HitRow {
                    seed,
                    item_id: id,
                    target: normalize_word(&it.target),
                    hit_rate: hit_rate(model, &ctx.0, &it.target, table, cfg, s)?,
                })
            })
            .collect();
        for r in part {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn hits_to_csv(rows: &[HitRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "item_id", "target", "hit_rate"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.seed.to_string(), r.item_id.clone(), r.target.clone(), r.hit_rate.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn hits_from_csv(text: &str) -> Result<Vec<HitRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let bad = |msg: String| Error::Malformed { path: "<hits>".into(), line: i + 2, msg };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad("expected 4 fields".into()));
        }
        out.push(HitRow {
            seed: rec[0].parse().map_err(|e| bad(format!("seed: {e}")))?,
            item_id: rec[1].to_string(),
            target: rec[2].to_string(),
            hit_rate: rec[3].parse().map_err(|e| bad(format!("hit_rate: {e}")))?,
        });
    }
    Ok(out)
}

/// Per-item hit-rate change (seed-averaged), same semantics as [`report_compare`].
pub fn hits_compare(before: &[HitRow], after: &[HitRow]) -> Result<Vec<(String, f64)>> {
    let mean = |rows: &[HitRow]| {
        let mut m: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in rows {
            let e = m.entry(r.item_id.clone()).or_insert((0.0, 0));
            e.0 += r.hit_rate;
            e.1 += 1;
        }
        m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect::<BTreeMap<_, _>>()
    };
    let (b, a) = (mean(before), mean(after));
    if b.keys().ne(a.keys()) {
        return Err(Error::MismatchedContexts("probe item sets differ".into()));
    }
    Ok(a.iter().map(|(k, v)| (k.clone(), v - b[k])).collect())
}
