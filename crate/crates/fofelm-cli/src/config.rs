//! Run configuration: one TOML document drives the whole pipeline, so
//! experiments are versionable. Flags exist only for paths and overrides.

use fofelm::arch::{AdapterPlacement, ArchitectureConfig, Variant};
use fofelm::data::GeneratorSpec;
use fofelm::error::{Error, Result};
use fofelm::tensor::OptimizerConfig;
use fofelm::train::{Strategy, TrainPlan};
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Environment variable overriding `output_dir` (the only env knob).
pub const OUTPUT_DIR_ENV: &str = "FOFELM_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub generator: Option<GeneratorSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    pub vocab: VocabSection,
    pub architecture: ArchSection,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub adapt: Option<AdaptSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub dialects: Vec<String>,
    pub applications: Vec<String>,
    pub sentences_per_dialect: usize,
    pub divergence: f64,
    #[serde(default = "default_shared_words")]
    pub shared_words_per_slot: usize,
    #[serde(default = "default_dialect_words")]
    pub dialect_words_per_slot: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_shared_words() -> usize {
    40
}
fn default_dialect_words() -> usize {
    12
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl GeneratorSection {
    pub fn spec(&self, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            dialects: self.dialects.clone(),
            applications: self.applications.clone(),
            sentences_per_dialect: self.sentences_per_dialect,
            divergence: self.divergence,
            shared_words_per_slot: self.shared_words_per_slot,
            dialect_words_per_slot: self.dialect_words_per_slot,
            seed,
        }
    }
}

/// Pre-existing corpora instead of the generator: the directory must hold
/// `{dialect}.{train,dev,test}.tsv` files.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    pub dialects: Vec<String>,
    pub applications: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub top_k: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub variant: Variant,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_blocks")]
    pub num_blocks: usize,
    #[serde(default = "d_layers")]
    pub layers_per_block: usize,
    #[serde(default = "d_adapter")]
    pub adapter_dim: usize,
    #[serde(default)]
    pub adapter_placement: Option<AdapterPlacement>,
    #[serde(default = "d_alpha")]
    pub fofe_alpha: f64,
}

fn d_hidden() -> usize {
    768
}
fn d_blocks() -> usize {
    5
}
fn d_layers() -> usize {
    4
}
fn d_adapter() -> usize {
    96
}
fn d_alpha() -> f64 {
    0.7
}

impl ArchSection {
    pub fn to_config(
        &self,
        dialects: Vec<String>,
        applications: Vec<String>,
        vocab_size: usize,
    ) -> ArchitectureConfig {
        ArchitectureConfig {
            variant: self.variant,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            layers_per_block: self.layers_per_block,
            adapter_dim: self.adapter_dim,
            dialects,
            applications,
            vocab_size,
            adapter_placement: self.adapter_placement,
            fofe_alpha: self.fofe_alpha,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub proportions: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
}

fn d_patience() -> usize {
    3
}

impl TrainSection {
    pub fn plan(&self, seed: u64) -> Result<TrainPlan> {
        if !matches!(self.strategy, Strategy::Base | Strategy::PtA) {
            return Err(Error::Config(format!(
                "[train] strategy must be BASE or PT_A, got {}; adapter strategies run via `adapt`",
                self.strategy.name()
            )));
        }
        Ok(TrainPlan {
            strategy: self.strategy,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            dialect: None,
            patience: self.patience,
            max_batches_per_epoch: self.max_batches_per_epoch,
            proportions: self.proportions.clone(),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub strategy: Strategy,
    /// Dialects to adapt, one run each; defaults to every dialect.
    #[serde(default)]
    pub dialects: Option<Vec<String>>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub placement: Option<AdapterPlacement>,
}

impl AdaptSection {
    pub fn plan(&self, seed: u64, dialect: &str) -> Result<TrainPlan> {
        if !matches!(self.strategy, Strategy::RiA | Strategy::FtA) {
            return Err(Error::Config(format!(
                "[adapt] strategy must be RI_A or FT_A, got {}",
                self.strategy.name()
            )));
        }
        Ok(TrainPlan {
            strategy: self.strategy,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            dialect: Some(dialect.to_string()),
            patience: self.patience,
            max_batches_per_epoch: self.max_batches_per_epoch,
            proportions: None,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_split")]
    pub split: String,
    #[serde(default = "d_runs")]
    pub bench_runs: usize,
    #[serde(default = "d_queries")]
    pub bench_queries: usize,
}

fn d_split() -> String {
    "test".to_string()
}
fn d_runs() -> usize {
    3
}
fn d_queries() -> usize {
    16
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: d_split(),
            bench_runs: d_runs(),
            bench_queries: d_queries(),
        }
    }
}

impl RunConfig {
    /// Declared dialect/application sets, wherever they come from.
    pub fn labels(&self) -> Result<(Vec<String>, Vec<String>)> {
        if let Some(g) = &self.generator {
            Ok((g.dialects.clone(), g.applications.clone()))
        } else if let Some(d) = &self.data {
            Ok((d.dialects.clone(), d.applications.clone()))
        } else {
            Err(Error::Config(
                "config needs a [generator] or a [data] section".into(),
            ))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.top_k < 1 {
            return Err(Error::Config("vocab.top_k must be at least 1".into()));
        }
        if let Some(g) = &self.generator {
            g.spec(self.seed).validate()?;
            let sum: f64 = g.split.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "generator.split must sum to 1, got {sum}"
                )));
            }
        }
        if !matches!(self.eval.split.as_str(), "dev" | "test") {
            return Err(Error::Config(format!(
                "eval.split must be \"dev\" or \"test\", got {:?}",
                self.eval.split
            )));
        }
        self.labels().map(|_| ())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Config(format!(
            "cannot read config {}: {e}",
            path.as_ref().display()
        ))
    })?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical output layout under the run's output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths {
            out: cfg.output_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn corpus(&self, dialect: &str, split: &str) -> PathBuf {
        self.data_dir().join(format!("{dialect}.{split}.tsv"))
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.data_dir().join("ground_truth.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn coverage(&self) -> PathBuf {
        self.data_dir().join("coverage.txt")
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.out.join("base").join("checkpoint.ckpt")
    }

    pub fn base_metrics(&self) -> PathBuf {
        self.out.join("base").join("metrics.tsv")
    }

    pub fn adapt_ckpt(&self, dialect: &str) -> PathBuf {
        self.out.join("adapt").join(dialect).join("checkpoint.ckpt")
    }

    pub fn adapt_metrics(&self, dialect: &str) -> PathBuf {
        self.out.join("adapt").join(dialect).join("metrics.tsv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn report(&self, label: &str) -> PathBuf {
        self.eval_dir().join(format!("{label}.report.txt"))
    }

    pub fn bench_report(&self, label: &str) -> PathBuf {
        self.eval_dir().join(format!("{label}.bench.txt"))
    }

    pub fn comparison(&self) -> PathBuf {
        self.eval_dir().join("comparison.tsv")
    }
}
