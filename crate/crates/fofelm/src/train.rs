//! Training loop, proportional multi-dialect batch scheduling, and the
//! adapter training strategies.
//!
//! Strategies: BASE trains an adapter-free model on the combined data;
//! PT_A is the same loop with the adapters present from the first step;
//! RI_A freezes a base checkpoint, adds freshly initialized near-identity
//! adapters, and trains only one dialect's adapters on that dialect's data;
//! FT_A does the same starting from already-pretrained adapters. Frozen
//! groups stay byte-identical and their gradient accumulators stay exactly
//! zero (they never enter the batch graph with gradient tracking).

use crate::arch::{
    to_adapter_variant, AdapterPlacement, GraphRun, ModelGraph, RoutingKey, Variant,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::fofe::{context_bags, frame, Vocabulary};
use crate::tensor::{seeded_rng, Optimizer, OptimizerConfig};
use crate::data::TaggedRecord;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Base,
    RiA,
    PtA,
    FtA,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "BASE",
            Strategy::RiA => "RI_A",
            Strategy::PtA => "PT_A",
            Strategy::FtA => "FT_A",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Target dialect for RI_A / FT_A.
    #[serde(default)]
    pub dialect: Option<String>,
    /// Early-stopping patience on mean dev perplexity.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Optional cap on batches per epoch (desk-scale budgets).
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    /// Per-dialect sampling proportions; equal when omitted.
    #[serde(default)]
    pub proportions: Option<Vec<f64>>,
}

fn default_patience() -> usize {
    3
}

impl TrainPlan {
    pub fn new(strategy: Strategy, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainPlan {
            strategy,
            epochs,
            batch_size,
            optimizer: OptimizerConfig::default(),
            seed,
            dialect: None,
            patience: default_patience(),
            max_batches_per_epoch: None,
            proportions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if matches!(self.strategy, Strategy::RiA | Strategy::FtA) && self.dialect.is_none() {
            return Err(Error::Config(format!(
                "strategy {} requires a target dialect",
                self.strategy.name()
            )));
        }
        Ok(())
    }
}

// ── Corpus preparation and scheduling ──────────────────────────────────

/// Tokenized, framed sentences bucketed by (dialect index, application
/// index) of the architecture config.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    buckets: Vec<Vec<Vec<Vec<usize>>>>,
    dialects: Vec<String>,
    applications: Vec<String>,
}

impl PreparedCorpus {
    pub fn dialects(&self) -> &[String] {
        &self.dialects
    }

    pub fn applications(&self) -> &[String] {
        &self.applications
    }

    pub fn sentences(&self, dialect: usize, application: usize) -> &[Vec<usize>] {
        &self.buckets[dialect][application]
    }

    pub fn dialect_is_empty(&self, dialect: usize) -> bool {
        self.buckets[dialect].iter().all(|b| b.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        (0..self.dialects.len()).all(|d| self.dialect_is_empty(d))
    }

    /// Prediction points (tokens scored) in one dialect's bucket set.
    fn dialect_tokens(&self, dialect: usize) -> usize {
        self.buckets[dialect]
            .iter()
            .flat_map(|b| b.iter())
            .map(|s| s.len() - 1)
            .sum()
    }
}

/// Tokenize tagged records against the declared dialect/application sets.
pub fn prepare_corpus(
    records: &[TaggedRecord],
    vocab: &Vocabulary,
    dialects: &[String],
    applications: &[String],
) -> Result<PreparedCorpus> {
    let mut buckets = vec![vec![Vec::new(); applications.len()]; dialects.len()];
    for r in records {
        let d = dialects
            .iter()
            .position(|x| *x == r.dialect)
            .ok_or_else(|| Error::Data(format!("record dialect {:?} not declared", r.dialect)))?;
        let a = applications
            .iter()
            .position(|x| *x == r.application)
            .ok_or_else(|| {
                Error::Data(format!(
                    "record application {:?} not declared",
                    r.application
                ))
            })?;
        buckets[d][a].push(frame(&vocab.tokenize(&r.text)));
    }
    Ok(PreparedCorpus {
        buckets,
        dialects: dialects.to_vec(),
        applications: applications.to_vec(),
    })
}

/// One homogeneous training batch: every sentence shares the routing key.
#[derive(Debug, Clone)]
pub struct Batch {
    pub dialect: usize,
    pub application: usize,
    pub sentence_indices: Vec<usize>,
    pub tokens: usize,
}

/// Deterministic proportional interleaving of per-dialect corpora.
///
/// An epoch serves each dialect its proportional share of the total token
/// budget (set by the largest corpus relative to its proportion); smaller
/// corpora wrap around with a reshuffle.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    corpus: PreparedCorpus,
    proportions: Vec<f64>,
    seed: u64,
}

pub fn make_schedule(
    corpus: PreparedCorpus,
    proportions: Option<Vec<f64>>,
    seed: u64,
) -> Result<BatchSchedule> {
    if corpus.is_empty() {
        return Err(Error::Data("all corpora are empty".into()));
    }
    let n = corpus.dialects.len();
    let raw = match proportions {
        Some(p) => {
            if p.len() != n {
                return Err(Error::Config(format!(
                    "{} proportions for {} dialects",
                    p.len(),
                    n
                )));
            }
            if p.iter().any(|&v| v < 0.0) || p.iter().all(|&v| v == 0.0) {
                return Err(Error::Config(
                    "proportions must be non-negative and not all zero".into(),
                ));
            }
            p
        }
        None => vec![1.0; n],
    };
    for (d, &p) in raw.iter().enumerate() {
        if p > 0.0 && corpus.dialect_is_empty(d) {
            return Err(Error::Data(format!(
                "dialect {:?} has proportion {} but an empty corpus",
                corpus.dialects[d], p
            )));
        }
    }
    let sum: f64 = raw.iter().sum();
    let proportions = raw.into_iter().map(|v| v / sum).collect();
    Ok(BatchSchedule {
        corpus,
        proportions,
        seed,
    })
}

impl BatchSchedule {
    pub fn corpus(&self) -> &PreparedCorpus {
        &self.corpus
    }

    /// App-homogeneous batches for one dialect, shuffled; used as a stream.
    fn dialect_batches(
        &self,
        dialect: usize,
        batch_size: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Vec<Batch> {
        let mut batches = Vec::new();
        for (a, bucket) in self.corpus.buckets[dialect].iter().enumerate() {
            let mut idx: Vec<usize> = (0..bucket.len()).collect();
            idx.shuffle(rng);
            for chunk in idx.chunks(batch_size) {
                let tokens = chunk.iter().map(|&i| bucket[i].len() - 1).sum();
                batches.push(Batch {
                    dialect,
                    application: a,
                    sentence_indices: chunk.to_vec(),
                    tokens,
                });
            }
        }
        batches.shuffle(rng);
        batches
    }

    /// The batch sequence for one epoch. Dialects are interleaved greedily
    /// so that served token counts track the proportions within one batch.
    pub fn epoch_batches(&self, epoch: usize, batch_size: usize, cap: Option<usize>) -> Vec<Batch> {
        let n = self.corpus.dialects.len();
        let mut rngs: Vec<_> = (0..n)
            .map(|d| seeded_rng(self.seed, &format!("epoch:{epoch}:dialect:{d}")))
            .collect();
        let mut streams: Vec<Vec<Batch>> = (0..n)
            .map(|d| {
                if self.proportions[d] > 0.0 {
                    self.dialect_batches(d, batch_size, &mut rngs[d])
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut pos = vec![0usize; n];
        let mut served = vec![0usize; n];

        // Epoch budget: the dialect with the largest corpus relative to its
        // proportion is consumed exactly once; smaller corpora wrap.
        let budget = (0..n)
            .filter(|&d| self.proportions[d] > 0.0)
            .map(|d| self.corpus.dialect_tokens(d) as f64 / self.proportions[d])
            .fold(0.0f64, f64::max);

        let mut out = Vec::new();
        let mut total = 0.0f64;
        while total < budget {
            if let Some(c) = cap {
                if out.len() >= c {
                    break;
                }
            }
            let d = (0..n)
                .filter(|&d| self.proportions[d] > 0.0)
                .min_by(|&a, &b| {
                    let ra = served[a] as f64 / self.proportions[a];
                    let rb = served[b] as f64 / self.proportions[b];
                    ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
                })
                .expect("at least one positive proportion");
            if pos[d] >= streams[d].len() {
                streams[d] = self.dialect_batches(d, batch_size, &mut rngs[d]);
                pos[d] = 0;
            }
            let batch = streams[d][pos[d]].clone();
            pos[d] += 1;
            served[d] += batch.tokens;
            total += batch.tokens as f64;
            out.push(batch);
        }
        out
    }
}

// ── Metrics log ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub strategy: String,
    pub dev_ppl: Vec<f64>,
    pub seconds: f64,
}

/// One line per epoch: epoch, strategy, per-dialect dev perplexity, seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub dialects: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(dialects: Vec<String>) -> Self {
        MetricsLog {
            dialects,
            rows: Vec::new(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tstrategy");
        for d in &self.dialects {
            out.push_str(&format!("\tppl:{d}"));
        }
        out.push_str("\tseconds\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}", r.epoch, r.strategy));
            for p in &r.dev_ppl {
                out.push_str(&format!("\t{p:.6}"));
            }
            out.push_str(&format!("\t{:.3}\n", r.seconds));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty metrics log".into()))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 3 || cols[0] != "epoch" || cols[1] != "strategy" || cols[cols.len() - 1] != "seconds" {
            return Err(Error::Format("unexpected metrics header".into()));
        }
        let dialects: Vec<String> = cols[2..cols.len() - 1]
            .iter()
            .map(|c| {
                c.strip_prefix("ppl:")
                    .map(str::to_string)
                    .ok_or_else(|| Error::Format(format!("bad metrics column {c}")))
            })
            .collect::<Result<_>>()?;
        let mut log = MetricsLog::new(dialects);
        for line in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != cols.len() {
                return Err(Error::Format("ragged metrics row".into()));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number {s}")))
            };
            log.rows.push(MetricsRow {
                epoch: parts[0]
                    .parse()
                    .map_err(|_| Error::Format("bad epoch".into()))?,
                strategy: parts[1].to_string(),
                dev_ppl: parts[2..parts.len() - 1]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<_>>()?,
                seconds: parse(parts[parts.len() - 1])?,
            });
        }
        Ok(log)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Data(format!(
                "cannot read metrics {}: {e}",
                path.as_ref().display()
            ))
        })?;
        MetricsLog::from_tsv(&text)
    }
}

// ── Training state and outcome ─────────────────────────────────────────

/// Trainer-owned state stored in the checkpoint for exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingState {
    pub plan: TrainPlan,
    pub epochs_completed: usize,
    pub dev_history: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub metrics: MetricsLog,
    pub loss_curve: Vec<f64>,
    pub optimizer_slots: crate::tensor::OptimSlots,
    pub state: TrainingState,
}

/// Resume payload recovered from a checkpoint.
#[derive(Debug, Default)]
pub struct ResumeData {
    pub optimizer_slots: crate::tensor::OptimSlots,
    pub state: Option<TrainingState>,
}

fn mean_dev_ppl(model: &ModelGraph, dev: &PreparedCorpus) -> Result<(Vec<f64>, f64)> {
    let cfg = model.config();
    let mut per_dialect = Vec::with_capacity(cfg.dialects.len());
    for d in 0..cfg.dialects.len() {
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for a in 0..cfg.applications.len() {
            let sentences = dev.sentences(d, a);
            if sentences.is_empty() {
                continue;
            }
            let key = RoutingKey {
                dialect: d,
                application: a,
            };
            let (n, t) = eval::corpus_nll(model, sentences, key)?;
            nll += n;
            tokens += t;
        }
        if tokens == 0 {
            return Err(Error::Data(format!(
                "dev corpus has no sentences for dialect {:?}",
                cfg.dialects[d]
            )));
        }
        per_dialect.push((nll / tokens as f64).exp());
    }
    let mean = per_dialect.iter().sum::<f64>() / per_dialect.len() as f64;
    Ok((per_dialect, mean))
}

/// The shared epoch loop. Assumes trainable flags are already set.
fn run_training(
    mut model: ModelGraph,
    schedule: &BatchSchedule,
    dev: &PreparedCorpus,
    plan: &TrainPlan,
    resume: ResumeData,
) -> Result<TrainOutcome> {
    plan.validate()?;
    let alpha = model.config().fofe_alpha;
    let mut optimizer = Optimizer::new(plan.optimizer);
    let mut dev_history = Vec::new();
    let mut start_epoch = 0;
    if let Some(state) = resume.state {
        let stored = serde_json::to_string(&state.plan)
            .map_err(|e| Error::Internal(format!("plan serialization: {e}")))?;
        let current = serde_json::to_string(plan)
            .map_err(|e| Error::Internal(format!("plan serialization: {e}")))?;
        if stored != current {
            return Err(Error::Config(
                "resume plan differs from the checkpointed plan".into(),
            ));
        }
        start_epoch = state.epochs_completed;
        dev_history = state.dev_history;
    }
    optimizer.import_state(
        resume
            .optimizer_slots
            .into_iter()
            .map(|(k, m, v, t)| (k, crate::tensor::AdamSlot { m, v, t }))
            .collect(),
    );

    let mut metrics = MetricsLog::new(model.config().dialects.clone());
    let mut loss_curve = Vec::new();

    for epoch in start_epoch..plan.epochs {
        let t0 = Instant::now();
        for batch in schedule.epoch_batches(epoch, plan.batch_size, plan.max_batches_per_epoch) {
            let bucket = schedule.corpus.sentences(batch.dialect, batch.application);
            let mut contexts = Vec::with_capacity(batch.tokens);
            let mut targets = Vec::with_capacity(batch.tokens);
            for &si in &batch.sentence_indices {
                for (bag, target) in context_bags(&bucket[si], alpha) {
                    contexts.push(bag);
                    targets.push(target);
                }
            }
            let key = RoutingKey {
                dialect: batch.dialect,
                application: batch.application,
            };
            let mut run = GraphRun::training();
            let logits = model.forward(&mut run, &contexts, Some(key))?;
            let loss = run.tape.softmax_xent(logits, targets)?;
            loss_curve.push(run.tape.scalar(loss));
            run.tape.backward(loss)?;
            run.harvest(&mut model);
            optimizer.step(model.groups_mut(), Some(&run.touched()));
        }

        let (per_dialect, mean) = mean_dev_ppl(&model, dev)?;
        dev_history.push(mean);
        metrics.rows.push(MetricsRow {
            epoch,
            strategy: plan.strategy.name().to_string(),
            dev_ppl: per_dialect,
            seconds: t0.elapsed().as_secs_f64(),
        });

        // Early stopping on mean dev perplexity.
        let best = dev_history.iter().cloned().fold(f64::INFINITY, f64::min);
        let since_best = dev_history
            .iter()
            .rev()
            .take_while(|&&v| v > best)
            .count();
        if since_best >= plan.patience {
            break;
        }
    }

    let epochs_completed = dev_history.len();
    let optimizer_slots = optimizer
        .export_state()
        .into_iter()
        .map(|(k, s)| (k, s.m, s.v, s.t))
        .collect();
    let state = TrainingState {
        plan: plan.clone(),
        epochs_completed,
        dev_history,
    };
    Ok(TrainOutcome {
        model,
        metrics,
        loss_curve,
        optimizer_slots,
        state,
    })
}

/// BASE / PT_A: train every group on the combined multi-dialect data.
/// BASE requires an adapter-free variant; PT_A requires the adapters to be
/// part of the architecture from the first step.
pub fn train_base(
    model: ModelGraph,
    train_records: &[TaggedRecord],
    dev_records: &[TaggedRecord],
    vocab: &Vocabulary,
    plan: &TrainPlan,
    resume: ResumeData,
) -> Result<TrainOutcome> {
    let variant = model.config().variant;
    match plan.strategy {
        Strategy::Base => {
            if variant.has_adapters() {
                return Err(Error::Config(format!(
                    "BASE expects an adapter-free variant; {} carries adapters (use PT_A)",
                    variant.name()
                )));
            }
        }
        Strategy::PtA => {
            if !variant.has_adapters() {
                return Err(Error::Config(format!(
                    "PT_A expects an adapter-bearing variant, got {}",
                    variant.name()
                )));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "train_base cannot run strategy {}",
                other.name()
            )))
        }
    }
    let mut model = model;
    model.set_all_trainable();
    let cfg = model.config().clone();
    let prepared = prepare_corpus(train_records, vocab, &cfg.dialects, &cfg.applications)?;
    if prepared.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let dev = prepare_corpus(dev_records, vocab, &cfg.dialects, &cfg.applications)?;
    let schedule = make_schedule(prepared, plan.proportions.clone(), plan.seed)?;
    run_training(model, &schedule, &dev, plan, resume)
}

fn one_hot_proportions(cfg_dialects: &[String], dialect: &str) -> Result<Vec<f64>> {
    let idx = cfg_dialects
        .iter()
        .position(|d| d == dialect)
        .ok_or_else(|| Error::Routing(format!("unknown dialect {dialect:?}")))?;
    let mut p = vec![0.0; cfg_dialects.len()];
    p[idx] = 1.0;
    Ok(p)
}

fn run_adapter_training(
    mut model: ModelGraph,
    dialect: &str,
    train_records: &[TaggedRecord],
    dev_records: &[TaggedRecord],
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    model.freeze_except_dialect_adapters(dialect)?;
    let cfg = model.config().clone();
    let dialect_records: Vec<TaggedRecord> = train_records
        .iter()
        .filter(|r| r.dialect == dialect)
        .cloned()
        .collect();
    if dialect_records.is_empty() {
        return Err(Error::Data(format!(
            "no training records for dialect {dialect:?}"
        )));
    }
    let dev_dialect: Vec<TaggedRecord> = dev_records
        .iter()
        .filter(|r| r.dialect == dialect)
        .cloned()
        .collect();
    let prepared = prepare_corpus(&dialect_records, vocab, &cfg.dialects, &cfg.applications)?;
    let dev = prepare_corpus(
        if dev_dialect.is_empty() { dev_records } else { &dev_dialect },
        vocab,
        &cfg.dialects,
        &cfg.applications,
    )?;
    let proportions = one_hot_proportions(&cfg.dialects, dialect)?;
    let schedule = make_schedule(prepared, Some(proportions), plan.seed)?;

    // Per-dialect adaptation only evaluates the target dialect; fill the
    // metrics columns for other dialects with the target value is wrong, so
    // evaluate just the target dialect and record it alone.
    let mut outcome = run_adapter_epochs(model, &schedule, &dev, dialect, plan)?;
    outcome.state.plan = plan.clone();
    Ok(outcome)
}

fn run_adapter_epochs(
    mut model: ModelGraph,
    schedule: &BatchSchedule,
    dev: &PreparedCorpus,
    dialect: &str,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    let alpha = model.config().fofe_alpha;
    let cfg = model.config().clone();
    let d_idx = cfg
        .dialects
        .iter()
        .position(|d| d == dialect)
        .ok_or_else(|| Error::Routing(format!("unknown dialect {dialect:?}")))?;
    let mut optimizer = Optimizer::new(plan.optimizer);
    let mut metrics = MetricsLog::new(vec![dialect.to_string()]);
    let mut loss_curve = Vec::new();
    let mut dev_history = Vec::new();

    for epoch in 0..plan.epochs {
        let t0 = Instant::now();
        for batch in schedule.epoch_batches(epoch, plan.batch_size, plan.max_batches_per_epoch) {
            let bucket = schedule.corpus.sentences(batch.dialect, batch.application);
            let mut contexts = Vec::with_capacity(batch.tokens);
            let mut targets = Vec::with_capacity(batch.tokens);
            for &si in &batch.sentence_indices {
                for (bag, target) in context_bags(&bucket[si], alpha) {
                    contexts.push(bag);
                    targets.push(target);
                }
            }
            let key = RoutingKey {
                dialect: batch.dialect,
                application: batch.application,
            };
            let mut run = GraphRun::training();
            let logits = model.forward(&mut run, &contexts, Some(key))?;
            let loss = run.tape.softmax_xent(logits, targets)?;
            loss_curve.push(run.tape.scalar(loss));
            run.tape.backward(loss)?;
            run.harvest(&mut model);
            optimizer.step(model.groups_mut(), Some(&run.touched()));
        }

        let mut nll = 0.0;
        let mut tokens = 0usize;
        for a in 0..cfg.applications.len() {
            let sentences = dev.sentences(d_idx, a);
            if sentences.is_empty() {
                continue;
            }
            let key = RoutingKey {
                dialect: d_idx,
                application: a,
            };
            let (n, t) = eval::corpus_nll(&model, sentences, key)?;
            nll += n;
            tokens += t;
        }
        if tokens == 0 {
            return Err(Error::Data(format!(
                "dev corpus has no sentences for dialect {dialect:?}"
            )));
        }
        let ppl = (nll / tokens as f64).exp();
        dev_history.push(ppl);
        metrics.rows.push(MetricsRow {
            epoch,
            strategy: plan.strategy.name().to_string(),
            dev_ppl: vec![ppl],
            seconds: t0.elapsed().as_secs_f64(),
        });

        let best = dev_history.iter().cloned().fold(f64::INFINITY, f64::min);
        let since_best = dev_history.iter().rev().take_while(|&&v| v > best).count();
        if since_best >= plan.patience {
            break;
        }
    }

    let epochs_completed = dev_history.len();
    let optimizer_slots = optimizer
        .export_state()
        .into_iter()
        .map(|(k, s)| (k, s.m, s.v, s.t))
        .collect();
    Ok(TrainOutcome {
        model,
        metrics,
        loss_curve,
        optimizer_slots,
        state: TrainingState {
            plan: plan.clone(),
            epochs_completed,
            dev_history,
        },
    })
}

/// RI_A: freeze a pre-trained adapter-free base, add freshly initialized
/// near-identity adapters, and train only `dialect`'s adapters on that
/// dialect's data. Every non-adapter group stays byte-identical.
pub fn train_adapter_ri(
    base: &ModelGraph,
    dialect: &str,
    train_records: &[TaggedRecord],
    dev_records: &[TaggedRecord],
    vocab: &Vocabulary,
    plan: &TrainPlan,
    placement: Option<AdapterPlacement>,
) -> Result<TrainOutcome> {
    if plan.strategy != Strategy::RiA {
        return Err(Error::Config(format!(
            "train_adapter_ri requires strategy RI_A, got {}",
            plan.strategy.name()
        )));
    }
    let model = to_adapter_variant(base, placement, plan.seed)?;
    run_adapter_training(model, dialect, train_records, dev_records, vocab, plan)
}

/// FT_A: fine-tune the already-pretrained adapters of one dialect on that
/// dialect's data, keeping everything else frozen. The checkpoint must be an
/// adapter-bearing variant (e.g. from PT_A).
pub fn finetune_adapter(
    pretrained: &ModelGraph,
    dialect: &str,
    train_records: &[TaggedRecord],
    dev_records: &[TaggedRecord],
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    if plan.strategy != Strategy::FtA {
        return Err(Error::Config(format!(
            "finetune_adapter requires strategy FT_A, got {}",
            plan.strategy.name()
        )));
    }
    if !pretrained.config().variant.has_adapters() {
        return Err(Error::Config(format!(
            "checkpoint variant {} carries no adapters to fine-tune",
            pretrained.config().variant.name()
        )));
    }
    run_adapter_training(
        pretrained.clone(),
        dialect,
        train_records,
        dev_records,
        vocab,
        plan,
    )
}

/// Variant conversion used by RI_A, re-exported for inspection flows.
pub fn adapter_counterpart(variant: Variant) -> Option<Variant> {
    match variant {
        Variant::Mixture => Some(Variant::MixtureA),
        Variant::Ad => Some(Variant::AdA),
        _ => None,
    }
}
