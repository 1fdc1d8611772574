//! Command implementations. Every command is a pure function of the config
//! bytes, the input files, and the seed; reruns produce identical outputs
//! except for wall-clock fields in metrics logs.

use crate::config::{RunConfig, RunPaths};
use fofelm::arch::{
    load_model, save_model, CheckpointExtras, CountMode, GroupRole, LoadedModel, ModelGraph,
};
use fofelm::data::{
    build_vocab, corpus_stats, coverage, generate_synthetic_corpus, read_corpus, split,
    write_corpus, TaggedRecord,
};
use fofelm::error::{Error, Result};
use fofelm::eval::{bench_latency, compare, EvalReport, LatencyEntry};
use fofelm::fofe::{frame, Vocabulary};
use fofelm::train::{
    finetune_adapter, train_base, train_adapter_ri, MetricsLog, ResumeData, Strategy,
    TrainOutcome, TrainingState,
};
use fofelm::tensor::derive_seed;
use std::fs;
use std::path::{Path, PathBuf};

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let section = cfg
        .generator
        .as_ref()
        .ok_or_else(|| Error::Config("generate requires a [generator] section".into()))?;
    let spec = section.spec(cfg.seed);
    let (records, truth) = generate_synthetic_corpus(&spec)?;
    let ratios = (section.split[0], section.split[1], section.split[2]);

    for dialect in &spec.dialects {
        let of_dialect: Vec<TaggedRecord> = records
            .iter()
            .filter(|r| &r.dialect == dialect)
            .cloned()
            .collect();
        let (train, dev, test) = split(
            &of_dialect,
            ratios,
            derive_seed(cfg.seed, &format!("split:{dialect}")),
        )?;
        write_corpus(paths.corpus(dialect, "train"), &train)?;
        write_corpus(paths.corpus(dialect, "dev"), &dev)?;
        write_corpus(paths.corpus(dialect, "test"), &test)?;
        println!(
            "generate: {dialect}: {} train / {} dev / {} test sentences",
            train.len(),
            dev.len(),
            test.len()
        );
    }
    truth.write_to(paths.ground_truth())?;

    let stats = corpus_stats(&records);
    for ((d, a), words) in &stats.word_counts {
        println!("generate: words[{d}/{a}] = {words}");
    }
    println!("generate: ground truth at {}", paths.ground_truth().display());
    Ok(())
}

fn read_split(paths: &RunPaths, dialects: &[String], split_name: &str) -> Result<Vec<TaggedRecord>> {
    let mut out = Vec::new();
    for d in dialects {
        out.extend(read_corpus(paths.corpus(d, split_name))?);
    }
    Ok(out)
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let (dialects, _) = cfg.labels()?;
    let train = read_split(&paths, &dialects, "train")?;
    let vocab = build_vocab(train.iter().map(|r| r.text.as_str()), cfg.vocab.top_k)?;
    vocab.write_to(paths.vocab())?;
    println!(
        "build-vocab: {} words ({} content) -> {}",
        vocab.size(),
        vocab.content_words().len(),
        paths.vocab().display()
    );

    // Coverage of the joint vocabulary against per-dialect vocabularies of
    // the same size.
    let mut lines = String::new();
    for d in &dialects {
        let single_records = read_corpus(paths.corpus(d, "train"))?;
        let single = build_vocab(
            single_records.iter().map(|r| r.text.as_str()),
            cfg.vocab.top_k,
        )?;
        let pct = coverage(&vocab, &single)?;
        lines.push_str(&format!("coverage {d} {pct:.2}\n"));
        println!("build-vocab: coverage vs {d} vocabulary: {pct:.2}%");
    }
    fs::write(paths.coverage(), lines)?;
    Ok(())
}

fn load_vocab(paths: &RunPaths) -> Result<Vocabulary> {
    Vocabulary::read_from(paths.vocab())
}

fn save_outcome(
    ckpt: &Path,
    metrics: &Path,
    outcome: &TrainOutcome,
    vocab_hash: &str,
) -> Result<()> {
    let state = serde_json::to_value(&outcome.state)
        .map_err(|e| Error::Internal(format!("state serialization: {e}")))?;
    let extras = CheckpointExtras {
        optimizer_slots: outcome.optimizer_slots.clone(),
        training_state: Some(state),
    };
    save_model(ckpt, &outcome.model, vocab_hash, &extras)?;
    outcome.metrics.write_to(metrics)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let section = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train requires a [train] section".into()))?;
    let plan = section.plan(cfg.seed)?;
    let (dialects, applications) = cfg.labels()?;
    let vocab = load_vocab(&paths)?;
    let train_records = read_split(&paths, &dialects, "train")?;
    let dev_records = read_split(&paths, &dialects, "dev")?;

    let arch = cfg
        .architecture
        .to_config(dialects, applications, vocab.size());
    let (model, resume_data) = match resume {
        Some(path) => {
            let loaded = load_model(&path)?;
            if loaded.vocab_sha256 != vocab.sha256_hex() {
                return Err(Error::Comparison(
                    "checkpoint was trained under a different vocabulary".into(),
                ));
            }
            let state: Option<TrainingState> = loaded
                .training_state
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| Error::Format(format!("training state: {e}")))?;
            (
                loaded.model,
                ResumeData {
                    optimizer_slots: loaded.optimizer_slots,
                    state,
                },
            )
        }
        None => (
            fofelm::arch::build_model(&arch, cfg.seed)?,
            ResumeData::default(),
        ),
    };

    let outcome = train_base(model, &train_records, &dev_records, &vocab, &plan, resume_data)?;
    save_outcome(
        &paths.base_ckpt(),
        &paths.base_metrics(),
        &outcome,
        &vocab.sha256_hex(),
    )?;
    println!(
        "train: {} epochs, final mean dev ppl {:.4} -> {}",
        outcome.state.epochs_completed,
        outcome.state.dev_history.last().copied().unwrap_or(f64::NAN),
        paths.base_ckpt().display()
    );
    Ok(())
}

pub fn cmd_adapt(cfg: &RunConfig, base: Option<PathBuf>) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let section = cfg
        .adapt
        .as_ref()
        .ok_or_else(|| Error::Config("adapt requires an [adapt] section".into()))?;
    let (dialects, _) = cfg.labels()?;
    let targets = section.dialects.clone().unwrap_or_else(|| dialects.clone());
    let vocab = load_vocab(&paths)?;
    let base_path = base.unwrap_or_else(|| paths.base_ckpt());
    let loaded = load_model(&base_path)?;
    if loaded.vocab_sha256 != vocab.sha256_hex() {
        return Err(Error::Comparison(
            "base checkpoint was trained under a different vocabulary".into(),
        ));
    }
    let train_records = read_split(&paths, &dialects, "train")?;
    let dev_records = read_split(&paths, &dialects, "dev")?;

    for dialect in &targets {
        let plan = section.plan(cfg.seed, dialect)?;
        let outcome = match section.strategy {
            Strategy::RiA => train_adapter_ri(
                &loaded.model,
                dialect,
                &train_records,
                &dev_records,
                &vocab,
                &plan,
                section.placement,
            )?,
            Strategy::FtA => finetune_adapter(
                &loaded.model,
                dialect,
                &train_records,
                &dev_records,
                &vocab,
                &plan,
            )?,
            _ => unreachable!("plan() validated the strategy"),
        };
        save_outcome(
            &paths.adapt_ckpt(dialect),
            &paths.adapt_metrics(dialect),
            &outcome,
            &vocab.sha256_hex(),
        )?;
        println!(
            "adapt[{}]: {dialect}: final dev ppl {:.4} -> {}",
            section.strategy.name(),
            outcome.state.dev_history.last().copied().unwrap_or(f64::NAN),
            paths.adapt_ckpt(dialect).display()
        );
    }
    Ok(())
}

/// Discover checkpoints produced by `train` and `adapt`, labeled.
fn discover_checkpoints(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if paths.base_ckpt().exists() {
        out.push(("base".to_string(), paths.base_ckpt()));
    }
    let (dialects, _) = cfg.labels()?;
    for d in &dialects {
        let p = paths.adapt_ckpt(d);
        if p.exists() {
            out.push((format!("adapt_{d}"), p));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(
            "no checkpoints found under the output directory; run `train` first".into(),
        ));
    }
    Ok(out)
}

fn label_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string())
}

fn test_sets_for(
    cfg: &RunConfig,
    paths: &RunPaths,
    vocab: &Vocabulary,
    model: &ModelGraph,
) -> Result<Vec<fofelm::eval::KeyedTestSet>> {
    let split_name = &cfg.eval.split;
    let arch = model.config();
    let mut out = Vec::new();
    for d in &arch.dialects {
        let records = read_corpus(paths.corpus(d, split_name))?;
        if records.is_empty() {
            return Err(Error::Data(format!(
                "{} split for dialect {d:?} is empty",
                split_name
            )));
        }
        for a in &arch.applications {
            let sentences: Vec<Vec<usize>> = records
                .iter()
                .filter(|r| &r.application == a)
                .map(|r| frame(&vocab.tokenize(&r.text)))
                .collect();
            if sentences.is_empty() {
                return Err(Error::Data(format!(
                    "{split_name} split has no ({d}, {a}) records"
                )));
            }
            out.push(((d.clone(), a.clone()), sentences));
        }
    }
    Ok(out)
}

fn training_lines(metrics_path: &Path) -> Vec<String> {
    // Echo the metrics log into the report without the wall-clock column.
    match MetricsLog::read_from(metrics_path) {
        Ok(log) => log
            .rows
            .iter()
            .map(|r| {
                let ppls: Vec<String> = log
                    .dialects
                    .iter()
                    .zip(&r.dev_ppl)
                    .map(|(d, p)| format!("ppl:{d}={p:.6}"))
                    .collect();
                format!("epoch {} strategy {} {}", r.epoch, r.strategy, ppls.join(" "))
            })
            .collect(),
        Err(_) => Vec::new(),
    }
}

fn metrics_path_for(label: &str, paths: &RunPaths) -> PathBuf {
    match label.strip_prefix("adapt_") {
        Some(d) => paths.adapt_metrics(d),
        None => paths.base_metrics(),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoints: Vec<PathBuf>) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let vocab = load_vocab(&paths)?;
    let targets: Vec<(String, PathBuf)> = if checkpoints.is_empty() {
        discover_checkpoints(cfg, &paths)?
    } else {
        checkpoints
            .into_iter()
            .map(|p| (label_for(&p), p))
            .collect()
    };

    for (label, path) in targets {
        let loaded = load_model(&path)?;
        if loaded.vocab_sha256 != vocab.sha256_hex() {
            return Err(Error::Comparison(format!(
                "checkpoint {label} was trained under a different vocabulary"
            )));
        }
        let test_sets = test_sets_for(cfg, &paths, &vocab, &loaded.model)?;
        let mut report = EvalReport::build(&label, &loaded.model, &loaded.vocab_sha256, &test_sets)?;
        report.training = training_lines(&metrics_path_for(&label, &paths));
        report.write_to(paths.report(&label))?;
        print!("{}", report.render());
        println!("eval: report -> {}", paths.report(&label).display());
    }
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<PathBuf>, runs: Option<usize>) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let vocab = load_vocab(&paths)?;
    let (label, path) = match checkpoint {
        Some(p) => (label_for(&p), p),
        None => discover_checkpoints(cfg, &paths)?.remove(0),
    };
    let loaded = load_model(&path)?;
    if loaded.vocab_sha256 != vocab.sha256_hex() {
        return Err(Error::Comparison(
            "checkpoint was trained under a different vocabulary".into(),
        ));
    }
    let runs = runs.unwrap_or(cfg.eval.bench_runs);
    let arch = loaded.model.config().clone();

    let mut report = EvalReport {
        label: format!("{label}-bench"),
        variant: arch.variant.name().to_string(),
        arch_fingerprint: arch.fingerprint(),
        vocab_sha256: loaded.vocab_sha256.clone(),
        notes: EvalReport::standard_notes(),
        params_total: loaded.model.count_params(CountMode::Total).total,
        ..Default::default()
    };
    for d in &arch.dialects {
        let records = read_corpus(paths.corpus(d, &cfg.eval.split))?;
        for a in &arch.applications {
            let queries: Vec<Vec<usize>> = records
                .iter()
                .filter(|r| &r.application == a)
                .take(cfg.eval.bench_queries)
                .map(|r| frame(&vocab.tokenize(&r.text)))
                .collect();
            if queries.is_empty() {
                return Err(Error::Data(format!("no bench queries for ({d}, {a})")));
            }
            let key = arch.key(d, a)?;
            let (_, stats) = bench_latency(&loaded.model, key, &queries, runs)?;
            println!(
                "bench: {d}/{a}: mean {:.4} ms, p95 {:.4} ms over {} samples ({} runs)",
                stats.mean_ms, stats.p95_ms, stats.samples, stats.runs
            );
            report.latencies.push(LatencyEntry {
                dialect: d.clone(),
                application: a.clone(),
                stats,
            });
        }
    }
    report.write_to(paths.bench_report(&label))?;
    println!("bench: report -> {}", paths.bench_report(&label).display());
    Ok(())
}

fn role_text(role: &GroupRole) -> String {
    match role {
        GroupRole::Shared => "shared".to_string(),
        GroupRole::Dialect(d) => format!("dialect:{d}"),
        GroupRole::Application(a) => format!("application:{a}"),
        GroupRole::DialectApplication(d, a) => format!("dialect_app:{d}:{a}"),
    }
}

pub fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let LoadedModel { model, vocab_sha256, .. } = load_model(checkpoint)?;
    let arch = model.config();
    let mut out = String::new();
    out.push_str(&format!("checkpoint {}\n", checkpoint.display()));
    out.push_str(&format!("variant {}\n", arch.variant.name()));
    out.push_str(&format!("vocab_sha256 {vocab_sha256}\n"));
    out.push_str(&format!(
        "dims d={} N={} L={} k={} vocab={} alpha={}\n",
        arch.hidden_dim,
        arch.num_blocks,
        arch.layers_per_block,
        arch.adapter_dim,
        arch.vocab_size,
        arch.fofe_alpha
    ));
    let audit = model.count_params(CountMode::Total);
    out.push_str(&format!("params_total {}\n", audit.total));
    for key in arch.all_keys() {
        let active = model.count_params(CountMode::Active(key)).total;
        out.push_str(&format!(
            "params_active {} {} {}\n",
            arch.dialects[key.dialect], arch.applications[key.application], active
        ));
    }
    out.push_str("groups:\n");
    for g in &audit.groups {
        out.push_str(&format!(
            "  {}\trole={}\tparams={}\ttrainable={}\n",
            g.name,
            role_text(&g.role),
            g.params,
            g.trainable
        ));
    }
    print!("{out}");
    let sidecar = checkpoint.with_extension("inspect.txt");
    fs::write(&sidecar, out)?;
    println!("inspect: listing -> {}", sidecar.display());
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let dir = paths.eval_dir();
    let mut report_paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().ends_with(".report.txt"))
                .unwrap_or(false)
        })
        .collect();
    report_paths.sort();
    if report_paths.is_empty() {
        return Err(Error::Data(format!(
            "no reports under {}; run `eval` first",
            dir.display()
        )));
    }
    let reports: Vec<EvalReport> = report_paths
        .iter()
        .map(EvalReport::read_from)
        .collect::<Result<_>>()?;
    let table = compare(&reports)?;
    let rendered = table.render();
    fs::write(paths.comparison(), &rendered)?;
    print!("{rendered}");
    println!("compare: table -> {}", paths.comparison().display());
    Ok(())
}
