//! One function per subcommand. Each writes its outputs, then the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use clozevar::corpus::{load_cloze_dataset, split_by_paragraph};
use clozevar::eval::{
    deltas_to_csv, evaluate, hits_compare, hits_from_csv, hits_to_csv, load_qa, probe_hit_rates,
    report_compare, Aggregate, DEFAULT_N_SAMPLES,
};
use clozevar::losses::train;
use clozevar::synth::{gen_world, to_cloze_dataset, write_truth};
use clozevar::tokenizer::{train_merges, DEFAULT_NUM_MERGES};
use clozevar::wordprob::DEFAULT_MAX_TOKENS;
use clozevar::{
    Checkpoint, ClozeDataset, ContextFormat, EvalReport, LmConfig, LossMode, MergeTable,
    PromptTemplate, SamplingConfig, TinyLm, TrainConfig,
};

use crate::args::{
    AblateArgs, EvalArgs, HyperArgs, Mode, PrepareArgs, ProbeArgs, ReportArgs, SampleArgs,
    SynthArgs, TrainArgs,
};
use crate::manifest::Run;
use crate::settings::{List, Settings};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];
pub const TRAIN_FRAC: f64 = 0.8;
pub const VAL_FRAC_OF_TRAIN: f64 = 0.1;
pub const DEFAULT_ABLATION_K: [usize; 5] = [1, 2, 4, 16, 32];

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

pub fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint_seed{seed}.json")
}

pub fn trainlog_name(seed: u64) -> String {
    format!("trainlog_seed{seed}.csv")
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_table(path: &Path) -> Result<MergeTable> {
    MergeTable::from_json(&read(path)?).with_context(|| format!("parsing tokenizer {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<ClozeDataset> {
    load_cloze_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a prepared directory (run `prepare` first)", dir.display());
    }
    Ok(())
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let split_seed = s.get("split-seed", a.split_seed, 42u64)?;
    let merges = s.get("merges", a.merges, DEFAULT_NUM_MERGES)?;

    let ds = load_dataset(&a.dataset)?;
    let splits = split_by_paragraph(&ds, TRAIN_FRAC, VAL_FRAC_OF_TRAIN, split_seed)?;
    // the prompt is part of the training text so instruction-mode inputs
    // stay inside the tokenizer's alphabet
    let template = PromptTemplate::default();
    let mut text = splits.train.text_for_tokenizer(Some(&template));
    if let Some(qa) = &a.qa {
        for item in load_qa(qa).with_context(|| format!("loading {}", qa.display()))? {
            text.push_str(&template.render(&item.context));
            text.push(' ');
            text.push_str(&item.target);
            text.push('\n');
        }
    }
    let table = train_merges(&text, merges)?;

    let mut run = Run::start("prepare", &a.out)?;
    run.input("dataset", &a.dataset);
    if let Some(qa) = &a.qa {
        run.input("qa", qa);
    }
    run.write(TRAIN_FILE, &splits.train.to_jsonl_string())?;
    run.write(VAL_FILE, &splits.val.to_jsonl_string())?;
    run.write(TEST_FILE, &splits.test.to_jsonl_string())?;
    run.write(TOKENIZER_FILE, &table.to_json())?;
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = vec![split_seed];
    run.manifest.tokenizer_hash = Some(table.vocab_hash());
    run.finish()?;
    println!(
        "{} contexts -> train {}, val {}, test {}; vocabulary {}",
        ds.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        table.vocab_size()
    );
    Ok(())
}

/// Training configuration shared by all seeds, plus the seed list.
pub fn resolve_train_config(
    s: &mut Settings,
    h: &HyperArgs,
    mode: Mode,
    k: Option<usize>,
) -> Result<(TrainConfig, Vec<u64>)> {
    let d = TrainConfig::default();
    let seeds = s.get("seeds", h.seeds.clone(), List(DEFAULT_SEEDS.to_vec()))?.0;
    let cfg = TrainConfig {
        mode: mode.loss_mode().unwrap_or(LossMode::MultiLabel),
        epochs: s.get("epochs", h.epochs, d.epochs)?,
        lr: s.get("lr", h.lr, d.lr)?,
        batch_size: s.get("batch", h.batch, d.batch_size)?,
        seed: seeds[0],
        label_subsample: s.opt("k", k)?,
        temperature: s.get("temperature", h.temperature, d.temperature)?,
        lm: LmConfig {
            embed_dim: s.get("embed-dim", h.embed_dim, d.lm.embed_dim)?,
            hidden: s.get("hidden", h.hidden, d.lm.hidden)?,
            window: s.get("window", h.window, d.lm.window)?,
        },
        template: d.template,
        prompted: s.flag("prompted", h.prompted)?,
    };
    cfg.validate()?;
    Ok((cfg, seeds))
}

pub struct Trained {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub log_csv: Option<String>,
    pub seconds: f64,
}

/// Trains one model per seed, in parallel; results come back in seed order.
pub fn train_seeds(
    mode: Mode,
    cfg: &TrainConfig,
    seeds: &[u64],
    train_ds: &ClozeDataset,
    val: Option<&ClozeDataset>,
    table: &MergeTable,
) -> Result<Vec<Trained>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let started = Instant::now();
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let init = TinyLm::init(table.vocab_size(), cfg.lm, seed)?;
            let (model, log_csv) = match mode {
                Mode::Base => (init, None),
                _ => {
                    let (m, log) = train(init, train_ds, val, &cfg, table)
                        .with_context(|| format!("training seed {seed}"))?;
                    (m, Some(log.to_csv()))
                }
            };
            let checkpoint = Checkpoint::new(model, table, cfg.context_format(), &mode.to_string(), seed);
            Ok(Trained { seed, checkpoint, log_csv, seconds: started.elapsed().as_secs_f64() })
        })
        .collect()
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut s = Settings::load(a.hyper.config.as_deref())?;
    let mode = s
        .opt("mode", a.mode)?
        .ok_or_else(|| anyhow!("no training mode given (--mode or `mode` in the config)"))?;
    let (cfg, seeds) = resolve_train_config(&mut s, &a.hyper, mode, a.k)?;

    require_dir(&a.dataset)?;
    let table = load_table(&a.dataset.join(TOKENIZER_FILE))?;
    let train_ds = load_dataset(&a.dataset.join(TRAIN_FILE))?;
    let val_path = a.dataset.join(VAL_FILE);
    let val = if val_path.exists() { Some(load_dataset(&val_path)?) } else { None };

    let trained = train_seeds(mode, &cfg, &seeds, &train_ds, val.as_ref(), &table)?;

    let mut run = Run::start("train", &a.out)?;
    run.input("dataset", &a.dataset);
    run.write(TOKENIZER_FILE, &table.to_json())?;
    for t in &trained {
        run.write(&checkpoint_name(t.seed), &t.checkpoint.to_json())?;
        if let Some(log) = &t.log_csv {
            run.write(&trainlog_name(t.seed), log)?;
        }
        run.manifest.timings.insert(format!("train_seed{}", t.seed), t.seconds);
    }
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = seeds;
    run.manifest.tokenizer_hash = Some(table.vocab_hash());
    run.finish()?;
    println!("trained {} model(s) in mode {mode}", trained.len());
    Ok(())
}

/// Checkpoints from a file or a `train` output directory, in seed order.
pub fn load_checkpoints(path: &Path, table: &MergeTable, seeds: Option<&[u64]>) -> Result<Vec<Checkpoint>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("checkpoint_seed") && n.ends_with(".json"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut cks = Vec::new();
    for f in &files {
        let ck = Checkpoint::from_json(&read(f)?, table).with_context(|| format!("loading {}", f.display()))?;
        cks.push(ck);
    }
    if let Some(wanted) = seeds {
        for s in wanted {
            if !cks.iter().any(|c| c.seed == *s) {
                bail!("no checkpoint for seed {s} in {}", path.display());
            }
        }
        cks.retain(|c| wanted.contains(&c.seed));
    }
    if cks.is_empty() {
        bail!("no checkpoints found in {}", path.display());
    }
    cks.sort_by_key(|c| c.seed);
    let format = &cks[0].context_format;
    if cks.iter().any(|c| &c.context_format != format) {
        bail!("checkpoints disagree on the context format");
    }
    Ok(cks)
}

fn checkpoint_dir(path: &Path) -> &Path {
    if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new("."))
    }
}

fn resolve_tokenizer(flag: Option<&Path>, checkpoint: &Path) -> PathBuf {
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_dir(checkpoint).join(TOKENIZER_FILE))
}

fn sampling(s: &mut Settings, a: &SampleArgs, temperature: Option<f64>) -> Result<SamplingConfig> {
    let cfg = SamplingConfig {
        n_samples: s.get("n-samples", a.n_samples, DEFAULT_N_SAMPLES)?,
        max_tokens: s.get("max-tokens", a.max_tokens, DEFAULT_MAX_TOKENS)?,
        temperature: s.get("temperature", temperature, 1.0)?,
    };
    if cfg.n_samples == 0 || cfg.max_tokens == 0 {
        bail!("--n-samples and --max-tokens must be >= 1");
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        bail!("temperature must be > 0");
    }
    Ok(cfg)
}

fn eval_checkpoints(
    cks: &[Checkpoint],
    test: &ClozeDataset,
    table: &MergeTable,
    cfg: &SamplingConfig,
) -> Result<EvalReport> {
    let runs: Vec<(u64, &TinyLm)> = cks.iter().map(|c| (c.seed, &c.model)).collect();
    Ok(evaluate(&runs, test, table, &cks[0].context_format, cfg)?)
}

fn format_agg(a: &Aggregate) -> String {
    format!("{:.4} ± {:.4}", a.mean, a.sd)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let cfg = sampling(&mut s, &a.sample, a.temperature)?;
    let seeds = s.opt("seeds", a.seeds.clone())?.map(|l| l.0);

    let tok = resolve_tokenizer(a.tokenizer.as_deref(), &a.checkpoint);
    let table = load_table(&tok)?;
    let cks = load_checkpoints(&a.checkpoint, &table, seeds.as_deref())?;
    let test_path = if a.dataset.is_dir() { a.dataset.join(TEST_FILE) } else { a.dataset.clone() };
    let test = load_dataset(&test_path)?;
    let report = eval_checkpoints(&cks, &test, &table, &cfg)?;

    let mut run = Run::start("eval", &a.out)?;
    run.input("checkpoint", &a.checkpoint);
    run.input("dataset", &test_path);
    run.input("tokenizer", &tok);
    run.write("report.csv", &report.to_csv())?;
    run.write("summary.json", &report.summary_json())?;
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = report.seeds.clone();
    run.manifest.tokenizer_hash = Some(table.vocab_hash());
    run.finish()?;
    println!("mode {}: mean TVD {}", cks[0].mode, format_agg(&report.aggregate("tvd_model_human")));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub k: usize,
    /// `None` for the aggregate row.
    pub seed: Option<u64>,
    pub mean_tvd: f64,
    pub sd_tvd: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,seed,mean_tvd,sd_tvd\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        let sd = r.sd_tvd.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.k, seed, r.mean_tvd, sd));
    }
    out
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut s = Settings::load(a.hyper.config.as_deref())?;
    let ks = s.get("k", a.k.clone(), List(DEFAULT_ABLATION_K.to_vec()))?.0;
    if ks.contains(&0) {
        bail!("k must be >= 1");
    }
    let (cfg, seeds) = resolve_train_config(&mut s, &a.hyper, Mode::MultiLabel, None)?;
    let sample = sampling(&mut s, &a.sample, a.hyper.temperature)?;

    require_dir(&a.dataset)?;
    let table = load_table(&a.dataset.join(TOKENIZER_FILE))?;
    let train_ds = load_dataset(&a.dataset.join(TRAIN_FILE))?;
    let test_path = a.test.clone().unwrap_or_else(|| a.dataset.join(TEST_FILE));
    let test = load_dataset(&test_path)?;

    let mut rows = Vec::new();
    let mut run = Run::start("ablate", &a.out)?;
    for &k in &ks {
        let started = Instant::now();
        let cfg = TrainConfig { label_subsample: Some(k), ..cfg.clone() };
        let trained = train_seeds(Mode::MultiLabel, &cfg, &seeds, &train_ds, None, &table)?;
        let cks: Vec<Checkpoint> = trained.into_iter().map(|t| t.checkpoint).collect();
        let report = eval_checkpoints(&cks, &test, &table, &sample)?;
        for &seed in &seeds {
            let m = report.seed_mean(seed, "tvd_model_human").expect("every seed evaluated");
            rows.push(AblationRow { k, seed: Some(seed), mean_tvd: m, sd_tvd: None });
        }
        let agg = report.aggregate("tvd_model_human");
        rows.push(AblationRow { k, seed: None, mean_tvd: agg.mean, sd_tvd: Some(agg.sd) });
        run.manifest.timings.insert(format!("k{k}"), started.elapsed().as_secs_f64());
        println!("k={k:>3}: mean TVD {}", format_agg(&agg));
    }

    run.input("dataset", &a.dataset);
    run.input("test", &test_path);
    run.write("ablation.csv", &ablation_csv(&rows))?;
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = seeds;
    run.manifest.tokenizer_hash = Some(table.vocab_hash());
    run.finish()?;
    Ok(())
}

pub fn probe_qa(a: &ProbeArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let cfg = sampling(&mut s, &a.sample, a.temperature)?;
    let seeds = s.opt("seeds", a.seeds.clone())?.map(|l| l.0);

    let tok = resolve_tokenizer(a.tokenizer.as_deref(), &a.checkpoint);
    let table = load_table(&tok)?;
    let cks = load_checkpoints(&a.checkpoint, &table, seeds.as_deref())?;
    let items = load_qa(&a.qa).with_context(|| format!("loading {}", a.qa.display()))?;
    if items.is_empty() {
        bail!("{} has no questions", a.qa.display());
    }
    let runs: Vec<(u64, &TinyLm)> = cks.iter().map(|c| (c.seed, &c.model)).collect();
    let format: &ContextFormat = &cks[0].context_format;
    let hits = probe_hit_rates(&runs, &items, &table, format, &cfg)
        .context("probe text must be covered by the tokenizer (see `prepare --qa`)")?;

    let mut run = Run::start("probe-qa", &a.out)?;
    run.input("checkpoint", &a.checkpoint);
    run.input("qa", &a.qa);
    run.write("hits.csv", &hits_to_csv(&hits))?;
    if let Some(before) = &a.before {
        run.input("before", before);
        let earlier = hits_from_csv(&read(before)?)?;
        let deltas = hits_compare(&earlier, &hits)?;
        let mut csv = String::from("item_id,hit_rate_delta\n");
        for (id, d) in &deltas {
            csv.push_str(&format!("{id},{d}\n"));
        }
        run.write("hit_deltas.csv", &csv)?;
    }
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = cks.iter().map(|c| c.seed).collect();
    run.manifest.tokenizer_hash = Some(table.vocab_hash());
    run.finish()?;
    let mean = hits.iter().map(|h| h.hit_rate).sum::<f64>() / hits.len() as f64;
    println!("{} item(s), mean hit rate {mean:.4}", items.len());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let contexts = s.get("contexts", a.contexts, 200usize)?;
    let vocab = s.get("vocab", a.vocab, 32usize)?;
    let alpha = s.get("alpha", a.alpha, 1.0f64)?;
    let m = s.get("m", a.m, 40usize)?;
    let seed = s.get("seed", a.seed, 7u64)?;
    let ann = s.get("annotation-seed", a.annotation_seed, 1u64)?;

    let world = gen_world(contexts, vocab, alpha, seed)?;
    let train_ds = to_cloze_dataset(&world, m, ann)?;
    let held = to_cloze_dataset(&world, m, ann.wrapping_add(1))?;

    let mut run = Run::start("synth", &a.out)?;
    run.write("dataset.jsonl", &train_ds.to_jsonl_string())?;
    run.write("heldout.jsonl", &held.to_jsonl_string())?;
    let truth_path = a.out.join("truth.json");
    write_truth(&world, &truth_path)?;
    run.write("truth.json", &read(&truth_path)?)?;
    run.manifest.config = s.resolved().clone();
    run.manifest.seeds = vec![seed, ann];
    run.finish()?;
    println!("{contexts} contexts over {vocab} words (alpha {alpha}), {m} annotations each");
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let before = EvalReport::load_csv(&a.before).with_context(|| format!("loading {}", a.before.display()))?;
    let after = EvalReport::load_csv(&a.after).with_context(|| format!("loading {}", a.after.display()))?;
    let deltas = report_compare(&before, &after)?;

    #[derive(Serialize)]
    struct Summary {
        before: BTreeMap<String, Aggregate>,
        after: BTreeMap<String, Aggregate>,
        contexts: usize,
        improved: usize,
    }
    let summary = Summary {
        before: before.summary(),
        after: after.summary(),
        contexts: deltas.len(),
        improved: deltas.iter().filter(|d| d.tvd_delta < 0.0).count(),
    };

    let mut run = Run::start("report", &a.out)?;
    run.input("before", &a.before);
    run.input("after", &a.after);
    run.write("deltas.csv", &deltas_to_csv(&deltas))?;
    run.write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    run.finish()?;

    println!("{:<22} {:>20} {:>20}", "metric", "before", "after");
    for (name, b) in &summary.before {
        println!("{name:<22} {:>20} {:>20}", format_agg(b), format_agg(&summary.after[name]));
    }
    println!("{} of {} contexts closer to humans", summary.improved, summary.contexts);
    Ok(())
}
