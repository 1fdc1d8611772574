//! Feedforward neural language models over fixed-size ordinally-forgetting
//! context encodings, for multi-dialect, multi-application modeling.
//!
//! The crate provides:
//! - [`tensor`]: a minimal reverse-mode autodiff engine over dense 2-D f64
//!   tensors, optimizers, and a bit-exact parameter container format;
//! - [`fofe`]: the context encoding, vocabulary, and tokenizer;
//! - [`arch`]: model builders and forward passes for the mixture and
//!   application-dependent families, with routing-key-driven sub-network
//!   activation, adapter bottlenecks, and parameter audits;
//! - [`data`]: corpus ingestion, vocabulary construction, coverage stats,
//!   and a synthetic multi-dialect corpus generator;
//! - [`train`]: the training loop, proportional multi-dialect batch
//!   scheduling, and the adapter training strategies with freezing;
//! - [`eval`]: perplexity, latency micro-benchmarks, and comparison reports.

pub mod arch;
pub mod data;
pub mod error;
pub mod eval;
pub mod fofe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
