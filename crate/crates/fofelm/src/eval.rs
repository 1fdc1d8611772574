//! Perplexity evaluation, latency micro-benchmarks, parameter audits, and
//! cross-variant comparison reports.
//!
//! Perplexity is the toolkit's intrinsic accuracy metric (reports say so
//! explicitly); latency is the in-process model forward time, reported as
//! mean and nearest-rank P95 pooled over the benchmark runs.

use crate::arch::{ContextBatch, CountMode, GraphRun, ModelGraph, RoutingKey};
use crate::error::{Error, Result};
use crate::fofe::context_bags;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Evaluation batch width (sentences per forward pass).
const EVAL_BATCH_SENTENCES: usize = 64;

/// Sum of per-token negative log-likelihood and the token count for a set of
/// framed sentences under one routing key. Accumulated in log space, so
/// incremental and concatenated evaluation agree to rounding.
pub fn corpus_nll(
    model: &ModelGraph,
    framed_sentences: &[Vec<usize>],
    key: RoutingKey,
) -> Result<(f64, usize)> {
    let alpha = model.config().fofe_alpha;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for chunk in framed_sentences.chunks(EVAL_BATCH_SENTENCES) {
        let mut contexts = Vec::new();
        let mut targets = Vec::new();
        for sentence in chunk {
            for (bag, target) in context_bags(sentence, alpha) {
                contexts.push(bag);
                targets.push(target);
            }
        }
        if contexts.is_empty() {
            continue;
        }
        let rows = targets.len();
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &contexts, Some(key))?;
        let loss = run.tape.softmax_xent(logits, targets)?;
        nll += run.tape.scalar(loss) * rows as f64;
        tokens += rows;
    }
    Ok((nll, tokens))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub value: f64,
    pub tokens: usize,
    pub nll_sum: f64,
}

/// exp(mean per-token negative log-likelihood) over a test set.
pub fn perplexity(
    model: &ModelGraph,
    framed_sentences: &[Vec<usize>],
    key: RoutingKey,
) -> Result<Perplexity> {
    let (nll_sum, tokens) = corpus_nll(model, framed_sentences, key)?;
    if tokens == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    Ok(Perplexity {
        value: (nll_sum / tokens as f64).exp(),
        tokens,
        nll_sum,
    })
}

// ── Latency ────────────────────────────────────────────────────────────

/// One timed query execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    pub millis: f64,
    pub run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
    pub samples: usize,
}

/// Nearest-rank 95th percentile: sorted ascending, rank ⌈0.95·n⌉.
pub fn nearest_rank_p95(values: &[f64]) -> f64 {
    nearest_rank(values, 0.95)
}

pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Relative changes below 10% count as equally fast (measurement noise).
/// The difference is taken relative to the smaller of the pair.
pub fn latency_equal(a_mean_ms: f64, b_mean_ms: f64) -> bool {
    let base = a_mean_ms.min(b_mean_ms);
    if base <= 0.0 {
        return a_mean_ms == b_mean_ms;
    }
    (a_mean_ms - b_mean_ms).abs() / base < 0.10
}

pub fn stats_from_samples(samples: &[LatencySample], runs: usize) -> LatencyStats {
    let values: Vec<f64> = samples.iter().map(|s| s.millis).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    LatencyStats {
        mean_ms: mean,
        p95_ms: nearest_rank_p95(&values),
        runs,
        samples: samples.len(),
    }
}

/// Time an arbitrary per-query action over `runs` passes (plus one untimed
/// warmup pass). Used both for models and for harness-overhead checks.
pub fn measure_queries<F: FnMut(usize) -> Result<()>>(
    queries: usize,
    runs: usize,
    mut action: F,
) -> Result<(Vec<LatencySample>, LatencyStats)> {
    if queries == 0 {
        return Err(Error::Data("empty query set".into()));
    }
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    for q in 0..queries {
        action(q)?;
    }
    let mut samples = Vec::with_capacity(queries * runs);
    for run in 0..runs {
        for q in 0..queries {
            let t0 = Instant::now();
            action(q)?;
            let nanos = t0.elapsed().as_nanos().max(1);
            samples.push(LatencySample {
                millis: nanos as f64 / 1e6,
                run,
            });
        }
    }
    let stats = stats_from_samples(&samples, runs);
    Ok((samples, stats))
}

/// Per-query forward-pass wall time for a model under one routing key.
/// Context bags are prepared outside the timed region; only the model
/// forward is measured.
pub fn bench_latency(
    model: &ModelGraph,
    key: RoutingKey,
    queries: &[Vec<usize>],
    runs: usize,
) -> Result<(Vec<LatencySample>, LatencyStats)> {
    let alpha = model.config().fofe_alpha;
    let prepared: Vec<(ContextBatch, Vec<usize>)> = queries
        .iter()
        .map(|sentence| {
            let mut contexts = Vec::new();
            let mut targets = Vec::new();
            for (bag, t) in context_bags(sentence, alpha) {
                contexts.push(bag);
                targets.push(t);
            }
            (contexts, targets)
        })
        .collect();
    if prepared.iter().any(|(c, _)| c.is_empty()) {
        return Err(Error::Data("bench query without prediction points".into()));
    }
    measure_queries(prepared.len(), runs, |q| {
        let mut run = GraphRun::inference();
        let logits = model.forward(&mut run, &prepared[q].0, Some(key))?;
        std::hint::black_box(run.tape.value(logits).data().first());
        Ok(())
    })
}

// ── Reports ────────────────────────────────────────────────────────────

/// Framed sentences for one (dialect, application) pair.
pub type KeyedTestSet = ((String, String), Vec<Vec<usize>>);

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityEntry {
    pub dialect: String,
    pub application: String,
    pub value: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveParamEntry {
    pub dialect: String,
    pub application: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEntry {
    pub dialect: String,
    pub application: String,
    pub stats: LatencyStats,
}

/// Fixed-field-order, human-readable evaluation report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub label: String,
    pub variant: String,
    pub arch_fingerprint: String,
    pub vocab_sha256: String,
    pub notes: Vec<String>,
    pub params_total: usize,
    pub params_active: Vec<ActiveParamEntry>,
    pub perplexities: Vec<PerplexityEntry>,
    pub latencies: Vec<LatencyEntry>,
    pub training: Vec<String>,
}

impl EvalReport {
    /// Standard notes stating what the metrics are (and are not).
    pub fn standard_notes() -> Vec<String> {
        vec![
            "accuracy metric: perplexity (intrinsic language-model proxy), not a speech word-error-rate".to_string(),
            "latency metric: in-process model forward time, not an end-to-end recognizer latency".to_string(),
        ]
    }

    /// Evaluate a model on per-key test sets and audit its parameters.
    pub fn build(
        label: &str,
        model: &ModelGraph,
        vocab_sha256: &str,
        test_sets: &[KeyedTestSet],
    ) -> Result<EvalReport> {
        let cfg = model.config();
        let mut report = EvalReport {
            label: label.to_string(),
            variant: cfg.variant.name().to_string(),
            arch_fingerprint: cfg.fingerprint(),
            vocab_sha256: vocab_sha256.to_string(),
            notes: EvalReport::standard_notes(),
            params_total: model.count_params(CountMode::Total).total,
            ..Default::default()
        };
        for key in cfg.all_keys() {
            report.params_active.push(ActiveParamEntry {
                dialect: cfg.dialects[key.dialect].clone(),
                application: cfg.applications[key.application].clone(),
                count: model.count_params(CountMode::Active(key)).total,
            });
        }
        for ((dialect, application), sentences) in test_sets {
            let key = cfg.key(dialect, application)?;
            let ppl = perplexity(model, sentences, key)?;
            report.perplexities.push(PerplexityEntry {
                dialect: dialect.clone(),
                application: application.clone(),
                value: ppl.value,
                tokens: ppl.tokens,
            });
        }
        Ok(report)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "fofelm-report v1");
        let _ = writeln!(out, "label {}", self.label);
        let _ = writeln!(out, "variant {}", self.variant);
        let _ = writeln!(out, "arch_fingerprint {}", self.arch_fingerprint);
        let _ = writeln!(out, "vocab_sha256 {}", self.vocab_sha256);
        for n in &self.notes {
            let _ = writeln!(out, "note {n}");
        }
        let _ = writeln!(out, "params_total {}", self.params_total);
        for e in &self.params_active {
            let _ = writeln!(
                out,
                "params_active {} {} {}",
                e.dialect, e.application, e.count
            );
        }
        for e in &self.perplexities {
            let _ = writeln!(
                out,
                "perplexity {} {} {:.6} tokens {}",
                e.dialect, e.application, e.value, e.tokens
            );
        }
        for e in &self.latencies {
            let _ = writeln!(
                out,
                "latency {} {} mean_ms {:.4} p95_ms {:.4} runs {} samples {}",
                e.dialect,
                e.application,
                e.stats.mean_ms,
                e.stats.p95_ms,
                e.stats.runs,
                e.stats.samples
            );
        }
        for line in &self.training {
            let _ = writeln!(out, "training {line}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        if lines.next() != Some("fofelm-report v1") {
            return Err(Error::Format("not a fofelm report".into()));
        }
        let mut report = EvalReport::default();
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let bad = || Error::Format(format!("bad report line: {line}"));
            match kind {
                "label" => report.label = rest.to_string(),
                "variant" => report.variant = rest.to_string(),
                "arch_fingerprint" => report.arch_fingerprint = rest.to_string(),
                "vocab_sha256" => report.vocab_sha256 = rest.to_string(),
                "note" => report.notes.push(rest.to_string()),
                "params_total" => {
                    report.params_total = rest.trim().parse().map_err(|_| bad())?;
                }
                "params_active" => {
                    if fields.len() != 3 {
                        return Err(bad());
                    }
                    report.params_active.push(ActiveParamEntry {
                        dialect: fields[0].into(),
                        application: fields[1].into(),
                        count: fields[2].parse().map_err(|_| bad())?,
                    });
                }
                "perplexity" => {
                    if fields.len() != 5 || fields[3] != "tokens" {
                        return Err(bad());
                    }
                    report.perplexities.push(PerplexityEntry {
                        dialect: fields[0].into(),
                        application: fields[1].into(),
                        value: fields[2].parse().map_err(|_| bad())?,
                        tokens: fields[4].parse().map_err(|_| bad())?,
                    });
                }
                "latency" => {
                    if fields.len() != 10 {
                        return Err(bad());
                    }
                    report.latencies.push(LatencyEntry {
                        dialect: fields[0].into(),
                        application: fields[1].into(),
                        stats: LatencyStats {
                            mean_ms: fields[3].parse().map_err(|_| bad())?,
                            p95_ms: fields[5].parse().map_err(|_| bad())?,
                            runs: fields[7].parse().map_err(|_| bad())?,
                            samples: fields[9].parse().map_err(|_| bad())?,
                        },
                    });
                }
                "training" => report.training.push(rest.to_string()),
                "" => {}
                _ => return Err(bad()),
            }
        }
        Ok(report)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<EvalReport> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Data(format!(
                "cannot read report {}: {e}",
                path.as_ref().display()
            ))
        })?;
        EvalReport::parse(&text)
    }
}

/// Comparison of several reports: one row per report, one column per metric,
/// minima marked with `*` (ties marked on every minimum).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub best: Vec<Vec<bool>>,
}

pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Comparison("no reports to compare".into()));
    }
    let vocab = &reports[0].vocab_sha256;
    for r in reports {
        if &r.vocab_sha256 != vocab {
            return Err(Error::Comparison(format!(
                "vocabulary fingerprint mismatch: report {:?} was evaluated under a different vocabulary",
                r.label
            )));
        }
    }

    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        for p in &r.perplexities {
            let c = format!("ppl:{}:{}", p.dialect, p.application);
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
    }
    columns.push("params_total".to_string());
    let any_latency = reports.iter().any(|r| !r.latencies.is_empty());
    if any_latency {
        for r in reports {
            for l in &r.latencies {
                let c = format!("latency_ms:{}:{}", l.dialect, l.application);
                if !columns.contains(&c) {
                    columns.push(c);
                }
            }
        }
    }

    let mut rows = Vec::new();
    for r in reports {
        let mut values: Vec<Option<f64>> = Vec::with_capacity(columns.len());
        for c in &columns {
            let v = if let Some(rest) = c.strip_prefix("ppl:") {
                let (d, a) = rest.split_once(':').unwrap();
                r.perplexities
                    .iter()
                    .find(|p| p.dialect == d && p.application == a)
                    .map(|p| p.value)
            } else if c == "params_total" {
                Some(r.params_total as f64)
            } else if let Some(rest) = c.strip_prefix("latency_ms:") {
                let (d, a) = rest.split_once(':').unwrap();
                r.latencies
                    .iter()
                    .find(|l| l.dialect == d && l.application == a)
                    .map(|l| l.stats.mean_ms)
            } else {
                None
            };
            values.push(v);
        }
        rows.push((r.label.clone(), values));
    }

    // Best per column = brute-force argmin; ties all marked.
    let mut best = vec![vec![false; columns.len()]; rows.len()];
    for (ci, _) in columns.iter().enumerate() {
        let min = rows
            .iter()
            .filter_map(|(_, v)| v[ci])
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            for (ri, (_, v)) in rows.iter().enumerate() {
                if v[ci] == Some(min) {
                    best[ri][ci] = true;
                }
            }
        }
    }

    Ok(ComparisonTable {
        columns,
        rows,
        best,
    })
}

impl ComparisonTable {
    /// Tab-separated rendering; the best value in each column carries `*`.
    pub fn render(&self) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (ri, (label, values)) in self.rows.iter().enumerate() {
            out.push_str(label);
            for (ci, v) in values.iter().enumerate() {
                out.push('\t');
                match v {
                    Some(x) => {
                        if self.columns[ci] == "params_total" {
                            out.push_str(&format!("{}", *x as u64));
                        } else {
                            out.push_str(&format!("{x:.6}"));
                        }
                        if self.best[ri][ci] {
                            out.push('*');
                        }
                    }
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }
}
