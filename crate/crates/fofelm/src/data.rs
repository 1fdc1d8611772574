//! Corpus ingestion, vocabulary construction, coverage statistics, and a
//! synthetic multi-dialect corpus generator for desk-scale experiments.
//!
//! Corpora are tab-separated lines: `dialect<TAB>application<TAB>text`.
//! The generator fills templated sentences from per-category word pools; a
//! divergence knob controls what fraction of slot words are dialect-specific,
//! which is what gives dialect adapters measurable signal.

use crate::error::{Error, Result};
use crate::fofe::Vocabulary;
use crate::tensor::seeded_rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One corpus line with its dialect and application tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedRecord {
    pub dialect: String,
    pub application: String,
    pub text: String,
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[TaggedRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        for field in [&r.dialect, &r.application, &r.text] {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::Data(format!(
                    "field {:?} contains a tab or newline",
                    field
                )));
            }
        }
        out.push_str(&r.dialect);
        out.push('\t');
        out.push_str(&r.application);
        out.push('\t');
        out.push_str(&r.text);
        out.push('\n');
    }
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TaggedRecord>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Data(format!(
            "cannot read corpus {}: {e}",
            path.as_ref().display()
        ))
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.splitn(3, '\t');
        let (d, a, t) = match (parts.next(), parts.next(), parts.next()) {
            (Some(d), Some(a), Some(t)) => (d, a, t),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected dialect<TAB>application<TAB>text",
                    path.as_ref().display(),
                    i + 1
                )))
            }
        };
        out.push(TaggedRecord {
            dialect: d.to_string(),
            application: a.to_string(),
            text: t.to_string(),
        });
    }
    Ok(out)
}

/// Word counts per (dialect, application), computed over lowercased
/// whitespace tokens.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub word_counts: BTreeMap<(String, String), usize>,
}

pub fn corpus_stats(records: &[TaggedRecord]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for r in records {
        *stats
            .word_counts
            .entry((r.dialect.clone(), r.application.clone()))
            .or_insert(0) += r.text.split_whitespace().count();
    }
    stats
}

/// Top-K most frequent words (ties broken lexicographically) plus the
/// reserved tokens.
pub fn build_vocab<'a, I>(lines: I, k: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if k < 1 {
        return Err(Error::Config("vocabulary size K must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for line in lines {
        any = true;
        for w in line.split_whitespace() {
            *counts.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Vocabulary::from_content_words(ranked.into_iter().map(|(w, _)| w))
}

/// |multi ∩ single| / |single| × 100 over content words.
pub fn coverage(multi: &Vocabulary, single: &Vocabulary) -> Result<f64> {
    let single_words = single.content_words();
    if single_words.is_empty() {
        return Err(Error::Data("reference vocabulary has no content words".into()));
    }
    let hits = single_words
        .iter()
        .filter(|w| multi.lookup(w).is_some())
        .count();
    Ok(hits as f64 / single_words.len() as f64 * 100.0)
}

/// Deterministic three-way split with largest-remainder apportionment.
pub fn split(
    records: &[TaggedRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<TaggedRecord>, Vec<TaggedRecord>, Vec<TaggedRecord>)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, "split"));

    let raw = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
    let mut counts = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut assigned: usize = counts.iter().sum();
    // Hand out remainders to the largest fractional parts, earliest first.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut oi = 0;
    while assigned < n {
        counts[order[oi % 3]] += 1;
        assigned += 1;
        oi += 1;
    }

    let take = |slice: &[usize]| -> Vec<TaggedRecord> {
        slice.iter().map(|&i| records[i].clone()).collect()
    };
    let train = take(&idx[..counts[0]]);
    let dev = take(&idx[counts[0]..counts[0] + counts[1]]);
    let test = take(&idx[counts[0] + counts[1]..]);
    Ok((train, dev, test))
}

// ── Synthetic corpus generator ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dialects: Vec<String>,
    pub applications: Vec<String>,
    pub sentences_per_dialect: usize,
    /// Fraction of slot words drawn from the dialect-specific pool.
    pub divergence: f64,
    /// Shared slot words per category.
    #[serde(default = "default_shared_words")]
    pub shared_words_per_slot: usize,
    /// Dialect-specific slot words per category per dialect.
    #[serde(default = "default_dialect_words")]
    pub dialect_words_per_slot: usize,
    pub seed: u64,
}

fn default_shared_words() -> usize {
    40
}
fn default_dialect_words() -> usize {
    12
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Config(format!(
                "divergence must lie in [0,1], got {}",
                self.divergence
            )));
        }
        if self.dialects.is_empty() {
            return Err(Error::Config("generator needs at least one dialect".into()));
        }
        if self.applications.is_empty() {
            return Err(Error::Config(
                "generator needs at least one application".into(),
            ));
        }
        if self.sentences_per_dialect == 0 {
            return Err(Error::Config("sentences_per_dialect must be positive".into()));
        }
        if self.shared_words_per_slot == 0 || self.dialect_words_per_slot == 0 {
            return Err(Error::Config("word pool sizes must be positive".into()));
        }
        Ok(())
    }
}

const CATEGORIES: [&str; 6] = ["noun", "verb", "adj", "name", "place", "device"];

/// Short command-style templates (first application style).
const ASSISTANT_TEMPLATES: [&str; 8] = [
    "play the {noun}",
    "call {name} now",
    "{verb} the {device}",
    "set a timer for ten minutes",
    "play {noun} by {name}",
    "what is the weather in {place}",
    "turn on the {adj} {device}",
    "open {place} directions",
];

/// Longer dictation-style templates (second application style).
const STT_TEMPLATES: [&str; 6] = [
    "i will meet {name} at the {place} after lunch today",
    "please remember to buy a {noun} and a {adj} {noun} tomorrow",
    "the {adj} {noun} near the {place} was really {adj} yesterday",
    "send a message to {name} saying i am at the {place} with the {noun}",
    "we should {verb} the {device} before we leave for {place} tonight",
    "my {name} said the {noun} in {place} looks {adj} this time of year",
];

/// Word pools for every category: the shared inventory plus one disjoint
/// inventory per dialect.
#[derive(Debug, Clone)]
pub struct SlotInventory {
    pub shared: BTreeMap<String, Vec<String>>,
    pub dialect: BTreeMap<(String, String), Vec<String>>,
}

fn dialect_tag(dialect: &str) -> String {
    dialect.to_lowercase().replace(|c: char| !c.is_alphanumeric(), "")
}

pub fn slot_inventory(spec: &GeneratorSpec) -> SlotInventory {
    let mut shared = BTreeMap::new();
    let mut dialect = BTreeMap::new();
    for cat in CATEGORIES {
        shared.insert(
            cat.to_string(),
            (0..spec.shared_words_per_slot)
                .map(|i| format!("{cat}{i:03}"))
                .collect(),
        );
        for dl in &spec.dialects {
            dialect.insert(
                (cat.to_string(), dl.clone()),
                (0..spec.dialect_words_per_slot)
                    .map(|i| format!("{cat}_{}{i:02}", dialect_tag(dl)))
                    .collect(),
            );
        }
    }
    SlotInventory { shared, dialect }
}

/// Zipf-like weights 1/(rank+1) over a pool.
fn pool_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 / (i + 1) as f64).collect()
}

fn templates_for_app(app_index: usize) -> &'static [&'static str] {
    if app_index.is_multiple_of(2) {
        &ASSISTANT_TEMPLATES
    } else {
        &STT_TEMPLATES
    }
}

/// Expected unigram distribution per dialect, exactly as the sampler draws.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruth {
    /// dialect → sorted (word, probability) pairs.
    pub unigram: BTreeMap<String, Vec<(String, f64)>>,
}

impl GroundTruth {
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("ground truth: {e}")))?;
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, json)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Data(format!(
                "cannot read ground truth {}: {e}",
                path.as_ref().display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("ground truth: {e}")))
    }
}

fn expected_unigram(spec: &GeneratorSpec, inv: &SlotInventory) -> GroundTruth {
    let mut unigram = BTreeMap::new();
    for dl in &spec.dialects {
        // Expected count per generated sentence for every word.
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        let app_p = 1.0 / spec.applications.len() as f64;
        let mut total = 0.0;
        for (ai, _) in spec.applications.iter().enumerate() {
            let templates = templates_for_app(ai);
            let t_p = app_p / templates.len() as f64;
            for template in templates {
                for token in template.split_whitespace() {
                    if let Some(cat) = token
                        .strip_prefix('{')
                        .and_then(|t| t.strip_suffix('}'))
                    {
                        let shared = &inv.shared[cat];
                        let sw = pool_weights(shared.len());
                        let sz: f64 = sw.iter().sum();
                        for (i, w) in shared.iter().enumerate() {
                            let p = (1.0 - spec.divergence) * sw[i] / sz;
                            if p > 0.0 {
                                *counts.entry(w.clone()).or_insert(0.0) += t_p * p;
                            }
                        }
                        let dialect_pool = &inv.dialect[&(cat.to_string(), dl.clone())];
                        let dw = pool_weights(dialect_pool.len());
                        let dz: f64 = dw.iter().sum();
                        for (i, w) in dialect_pool.iter().enumerate() {
                            let p = spec.divergence * dw[i] / dz;
                            if p > 0.0 {
                                *counts.entry(w.clone()).or_insert(0.0) += t_p * p;
                            }
                        }
                        total += t_p;
                    } else {
                        *counts.entry(token.to_string()).or_insert(0.0) += t_p;
                        total += t_p;
                    }
                }
            }
        }
        let dist: Vec<(String, f64)> = counts
            .into_iter()
            .map(|(w, c)| (w, c / total))
            .collect();
        unigram.insert(dl.clone(), dist);
    }
    GroundTruth { unigram }
}

/// Generate tagged corpora plus the exact distributions the sampler used.
/// Deterministic under the spec's seed; dialects are generated from
/// independent derived streams.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<(Vec<TaggedRecord>, GroundTruth)> {
    spec.validate()?;
    let inv = slot_inventory(spec);
    let mut records = Vec::with_capacity(spec.dialects.len() * spec.sentences_per_dialect);

    for dl in &spec.dialects {
        let mut rng = seeded_rng(spec.seed, &format!("gen:{dl}"));
        let shared_samplers: BTreeMap<&str, WeightedIndex<f64>> = CATEGORIES
            .iter()
            .map(|&c| {
                let w = pool_weights(inv.shared[c].len());
                (c, WeightedIndex::new(&w).expect("positive weights"))
            })
            .collect();
        let dialect_samplers: BTreeMap<&str, WeightedIndex<f64>> = CATEGORIES
            .iter()
            .map(|&c| {
                let w = pool_weights(inv.dialect[&(c.to_string(), dl.clone())].len());
                (c, WeightedIndex::new(&w).expect("positive weights"))
            })
            .collect();

        for _ in 0..spec.sentences_per_dialect {
            let ai = rng.random_range(0..spec.applications.len());
            let templates = templates_for_app(ai);
            let template = templates[rng.random_range(0..templates.len())];
            let mut words = Vec::new();
            for token in template.split_whitespace() {
                if let Some(cat) = token
                    .strip_prefix('{')
                    .and_then(|t| t.strip_suffix('}'))
                {
                    let from_dialect = rng.random_bool(spec.divergence);
                    let word = if from_dialect {
                        let pool = &inv.dialect[&(cat.to_string(), dl.clone())];
                        pool[dialect_samplers[cat].sample(&mut rng)].clone()
                    } else {
                        let pool = &inv.shared[cat];
                        pool[shared_samplers[cat].sample(&mut rng)].clone()
                    };
                    words.push(word);
                } else {
                    words.push(token.to_string());
                }
            }
            records.push(TaggedRecord {
                dialect: dl.clone(),
                application: spec.applications[ai].clone(),
                text: words.join(" "),
            });
        }
    }

    Ok((records, expected_unigram(spec, &inv)))
}
