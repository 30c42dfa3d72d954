//! Few-shot grounded dialog generation toolkit.
//!
//! The crate covers the whole experimental loop for prompting a small
//! autoregressive LM on grounded dialog tasks:
//!
//! * [`corpus`]: neutral JSONL corpus loading, grounding filters,
//!   truncation and seeded few-shot splits.
//! * [`prompting`]: rendering samples under no / continuous / discrete
//!   prompt schemes, for single-sequence or encoder-decoder layouts.
//! * [`embedding`]: initialization of new prompt-token embeddings and
//!   vocabulary extension.
//! * [`model`]: a double-precision causal transformer with hand-written
//!   backpropagation, AdamW training, beam and nucleus decoding.
//! * [`metrics`] and [`stats`]: BLEU-2, unigram F1, grounding F1, match
//!   ratio, perplexity and the bootstrap / t / sign significance tests.
//! * [`experiment`]: the config-driven prepare → run → evaluate → compare
//!   pipeline used by the `gdg` binary.
//!
//! Data-parallel loops (independent runs, bootstrap resamples, per-sample
//! gradients, metric scoring) go through [`exec::Execution`], which uses
//! rayon when the `parallel` feature is enabled and falls back to plain
//! iteration otherwise. Reductions always happen in index order, so both
//! paths produce bit-identical results.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod seed;
pub mod stats;
pub mod synthetic;
pub mod text;

pub use error::{Error, Result};
