//! Single-label and multi-label (generalized cross-entropy) objectives and the
//! mini-batch training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    augment_instruction_pairs, empirical_cpd, majority_label, subsample_labels, AnnotationMultiset,
    ClozeDataset, ClozeItem, ContextFormat, Cpd, PromptTemplate,
};
use crate::error::{Error, Result};
use crate::lm::{adam_step, AdamState, LmConfig, NextTokenModel, Tensors, TinyLm};
use crate::seed::{self, Purpose};
use crate::tokenizer::{MergeTable, TokenId, TokenSeq};
use crate::wordprob::word_prob;

/// `-log q(w* | c)` in nats.
pub fn loss_label<M>(model: &M, context: &[TokenId], target_word: &str, table: &MergeTable) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let p = word_prob(model, context, target_word, table)?;
    if p <= 0.0 {
        return Err(Error::ZeroProbabilityTarget(target_word.to_string()));
    }
    Ok(-p.ln())
}

/// `-Σ_w p̂(w) log q(w | c)` over the support of `p_hat`, in nats.
pub fn loss_var<M>(model: &M, context: &[TokenId], p_hat: &Cpd, table: &MergeTable) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let mut loss = 0.0;
    for (w, p) in p_hat.iter() {
        loss += p * loss_label(model, context, w, table)?;
    }
    Ok(loss)
}

/// One training example: a conditioning context and weighted target token
/// paths (weights sum to one).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub context: TokenSeq,
    pub targets: Vec<(TokenSeq, f64)>,
}

impl TrainItem {
    pub fn single(context: TokenSeq, target: TokenSeq) -> Self {
        TrainItem { context, targets: vec![(target, 1.0)] }
    }

    pub fn from_cpd(context: TokenSeq, p_hat: &Cpd, table: &MergeTable) -> Result<Self> {
        let targets = p_hat
            .iter()
            .map(|(w, p)| Ok((table.tokenize_word(w)?, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainItem { context, targets })
    }
}

/// Prefix tree of target paths below one context. Each node holds the weight
/// flowing to each next token; the loss decomposes over nodes because the word
/// log-probability is a sum of token log-conditionals.
type Trie = BTreeMap<Vec<TokenId>, BTreeMap<TokenId, f64>>;

fn add_paths(trie: &mut Trie, targets: &[(TokenSeq, f64)], scale: f64) {
    for (seq, w) in targets {
        let toks = seq.as_slice();
        for j in 0..toks.len() {
            *trie.entry(toks[..j].to_vec()).or_default().entry(toks[j]).or_insert(0.0) += w * scale;
        }
    }
}

fn trie_loss_grad(
    model: &TinyLm,
    context: &[TokenId],
    trie: &Trie,
    grad: Option<&mut Tensors>,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut ctx = context.to_vec();
    match grad {
        Some(g) => {
            for (prefix, next) in trie {
                ctx.truncate(context.len());
                ctx.extend_from_slice(prefix);
                let target: Vec<(TokenId, f64)> = next.iter().map(|(t, w)| (*t, *w)).collect();
                loss += model.accumulate_grad(&ctx, &target, 1.0, g)?;
            }
        }
        None => {
            for (prefix, next) in trie {
                ctx.truncate(context.len());
                ctx.extend_from_slice(prefix);
                let q = model.next_token_dist(&ctx)?;
                for (t, w) in next {
                    loss -= w * q[*t as usize].ln();
                }
            }
        }
    }
    Ok(loss)
}

/// Groups items by context into tries, scaling each item by `1 / items.len()`.
fn group_items(items: &[&TrainItem]) -> Vec<(Vec<TokenId>, Trie)> {
    let scale = 1.0 / items.len() as f64;
    let mut groups: BTreeMap<Vec<TokenId>, Trie> = BTreeMap::new();
    for it in items {
        add_paths(groups.entry(it.context.0.clone()).or_default(), &it.targets, scale);
    }
    groups.into_iter().collect()
}

const GROUP_CHUNK: usize = 8;

/// Mean item loss over `items` and, if requested, its gradient. Work is split
/// into fixed chunks reduced in order, so results do not depend on the thread
/// count.
pub fn batch_loss_grad(
    model: &TinyLm,
    items: &[&TrainItem],
    want_grad: bool,
) -> Result<(f64, Option<Tensors>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups = group_items(items);
    let parts: Vec<Result<(f64, Option<Tensors>)>> = groups
        .par_chunks(GROUP_CHUNK)
        .map(|chunk| {
            let mut g = want_grad.then(|| Tensors::zeros(&model.config, model.vocab_size));
            let mut loss = 0.0;
            for (ctx, trie) in chunk {
                loss += trie_loss_grad(model, ctx, trie, g.as_mut())?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad: Option<Tensors> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match (&mut grad, g) {
            (None, g) => grad = g,
            (Some(acc), Some(g)) => acc.add_scaled(&g, 1.0),
            (Some(_), None) => {}
        }
    }
    Ok((total, grad))
}

/// Loss and gradient of [`loss_var`] for a [`TinyLm`].
pub fn loss_var_grad(
    model: &TinyLm,
    context: &[TokenId],
    p_hat: &Cpd,
    table: &MergeTable,
) -> Result<(f64, Tensors)> {
    let item = TrainItem::from_cpd(TokenSeq(context.to_vec()), p_hat, table)?;
    let (loss, grad) = batch_loss_grad(model, &[&item], true)?;
    Ok((loss, grad.expect("gradient requested")))
}

pub fn loss_label_grad(
    model: &TinyLm,
    context: &[TokenId],
    word: &str,
    table: &MergeTable,
) -> Result<(f64, Tensors)> {
    loss_var_grad(model, context, &Cpd::point_mass(word), table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    OrigCorpus,
    MajorityLabel,
    MultiLabel,
    InstructionAugmented,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::OrigCorpus,
        LossMode::MajorityLabel,
        LossMode::MultiLabel,
        LossMode::InstructionAugmented,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::OrigCorpus => "orig_corpus",
            LossMode::MajorityLabel => "majority_label",
            LossMode::MultiLabel => "multi_label",
            LossMode::InstructionAugmented => "instruction_augmented",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Labels kept per context (sampled without replacement) when set.
    pub label_subsample: Option<usize>,
    /// Sampling temperature used at evaluation time.
    pub temperature: f64,
    pub lm: LmConfig,
    pub template: PromptTemplate,
    /// Condition the non-instruction modes on the rendered prompt rather than
    /// the bare context, so they learn the same q(r | prompt) as
    /// `instruction_augmented`.
    pub prompted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: LossMode::MultiLabel,
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 42,
            label_subsample: None,
            temperature: 1.0,
            lm: LmConfig::default(),
            template: PromptTemplate::default(),
            prompted: false,
        }
    }
}

impl TrainConfig {
    /// Short low-rate schedule for a small base model (GPT-2 scale).
    pub fn gpt2_preset() -> Self {
        TrainConfig { epochs: 3, lr: 1e-5, batch_size: 16, ..Default::default() }
    }

    /// Schedule for a 7B instruction model trained on augmented pairs.
    pub fn mistral_preset() -> Self {
        TrainConfig {
            mode: LossMode::InstructionAugmented,
            epochs: 4,
            lr: 1e-4,
            batch_size: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.label_subsample == Some(0) {
            return Err(Error::InvalidConfig("label subsample k must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {}", self.temperature)));
        }
        self.template.validate()
    }

    pub fn context_format(&self) -> ContextFormat {
        if self.prompted || self.mode == LossMode::InstructionAugmented {
            ContextFormat::Instruction { template: self.template.clone() }
        } else {
            ContextFormat::Plain
        }
    }
}

fn annotations_for(item: &ClozeItem, config: &TrainConfig) -> AnnotationMultiset {
    match config.label_subsample {
        Some(k) => {
            let s = seed::derive(config.seed, Purpose::Subsample, seed::hash_key(&item.context_id));
            subsample_labels(&item.annotations, k, s)
        }
        None => item.annotations.clone(),
    }
}

/// Training units: groups of items that always land in the same batch. All
/// modes but `instruction_augmented` have one item per unit; that mode keeps
/// every (prompt, response) pair of a context together.
pub fn build_units(
    ds: &ClozeDataset,
    config: &TrainConfig,
    table: &MergeTable,
) -> Result<Vec<Vec<TrainItem>>> {
    let mut units = Vec::with_capacity(ds.len());
    match config.mode {
        LossMode::InstructionAugmented => {
            let subsampled = ClozeDataset::new(
                ds.items
                    .iter()
                    .map(|it| ClozeItem { annotations: annotations_for(it, config), ..it.clone() })
                    .collect(),
            );
            let pairs = augment_instruction_pairs(&subsampled, &config.template)?;
            let mut by_ctx: Vec<(String, Vec<TrainItem>)> = Vec::new();
            let mut encoded: BTreeMap<String, TokenSeq> = BTreeMap::new();
            for pair in pairs {
                let ctx = match encoded.get(&pair.prompt) {
                    Some(c) => c.clone(),
                    None => {
                        let c = table.encode(&pair.prompt)?;
                        encoded.insert(pair.prompt.clone(), c.clone());
                        c
                    }
                };
                let item = TrainItem::single(ctx, table.tokenize_word(&pair.response)?);
                match by_ctx.last_mut() {
                    Some((id, unit)) if *id == pair.context_id => unit.push(item),
                    _ => by_ctx.push((pair.context_id, vec![item])),
                }
            }
            units.extend(by_ctx.into_iter().map(|(_, u)| u));
        }
        mode => {
            let format = config.context_format();
            for it in &ds.items {
                let ctx = table.encode(&format.render(&it.context))?;
                let item = match mode {
                    LossMode::OrigCorpus => {
                        TrainItem::single(ctx, table.tokenize_word(&it.corpus_word)?)
                    }
                    LossMode::MajorityLabel => {
                        let w = annotations_for(it, config);
                        let maj = majority_label(&w)
                            .ok_or_else(|| Error::EmptyAnnotations(it.context_id.clone()))?;
                        TrainItem::single(ctx, table.tokenize_word(maj)?)
                    }
                    LossMode::MultiLabel => {
                        let p_hat = empirical_cpd(&annotations_for(it, config))?;
                        TrainItem::from_cpd(ctx, &p_hat, table)?
                    }
                    LossMode::InstructionAugmented => unreachable!(),
                };
                units.push(vec![item]);
            }
        }
    }
    Ok(units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub mean_loss: f64,
    pub wallclock_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,split,mean_loss,wallclock_seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.12},{:.3}\n",
                r.epoch, r.split, r.mean_loss, r.wallclock_seconds
            ));
        }
        s
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.mean_loss).collect()
    }
}

/// Mean item loss of a dataset under the configured mode.
pub fn dataset_loss(
    model: &TinyLm,
    ds: &ClozeDataset,
    config: &TrainConfig,
    table: &MergeTable,
) -> Result<f64> {
    let units = build_units(ds, config, table)?;
    let items: Vec<&TrainItem> = units.iter().flatten().collect();
    Ok(batch_loss_grad(model, &items, false)?.0)
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `train`. Batch loss is
/// the mean over items. The log gets one `train` row per epoch (mean item loss
/// seen during the epoch) and, when `val` is given and non-empty, one `val` row
/// computed after the epoch.
pub fn train(
    mut model: TinyLm,
    train: &ClozeDataset,
    val: Option<&ClozeDataset>,
    config: &TrainConfig,
    table: &MergeTable,
) -> Result<(TinyLm, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.vocab_size != table.vocab_size() {
        return Err(Error::ShapeMismatch("model and tokenizer vocabularies differ".into()));
    }
    let units = build_units(train, config, table)?;
    let val_units = match val {
        Some(v) if !v.is_empty() => Some(build_units(v, config, table)?),
        _ => None,
    };
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut order: Vec<usize> = (0..units.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = seed::stream(config.seed, Purpose::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_items = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&TrainItem> = batch.iter().flat_map(|&u| units[u].iter()).collect();
            let (loss, grad) = batch_loss_grad(&model, &items, true)?;
            if !loss.is_finite() {
                return Err(Error::DivergedAt { epoch, batch: batch_idx });
            }
            adam_step(&mut model.params, &mut adam, &grad.expect("gradient requested"))
                .map_err(|_| Error::DivergedAt { epoch, batch: batch_idx })?;
            loss_sum += loss * items.len() as f64;
            n_items += items.len();
        }
        let elapsed = started.elapsed().as_secs_f64();
        log.rows.push(LogRow {
            epoch,
            split: "train".into(),
            mean_loss: loss_sum / n_items as f64,
            wallclock_seconds: elapsed,
        });
        if let Some(vu) = &val_units {
            let items: Vec<&TrainItem> = vu.iter().flatten().collect();
            let (loss, _) = batch_loss_grad(&model, &items, false)?;
            log.rows.push(LogRow {
                epoch,
                split: "val".into(),
                mean_loss: loss,
                wallclock_seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok((model, log))
}
