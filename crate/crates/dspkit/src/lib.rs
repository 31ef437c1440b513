//! Compose a frozen language model and a frozen retrieval model into
//! deliberate, task-aware pipelines.
//!
//! Programs are built from three stages that pass [`Example`]s around:
//! selecting and bootstrapping demonstrations ([`demonstrate`]), gathering
//! passages from a corpus ([`search`]), and producing grounded predictions
//! ([`predict`]). The [`lm`] and [`rm`] modules wrap the frozen models
//! behind a deterministic call cache, so a scripted mock LM plus the
//! built-in BM25 retriever give byte-replayable desk-scale runs; HTTP
//! backends plug in for live ones.
//!
//! Six reference pipelines ship in [`programs`], and [`eval`] provides the
//! metrics and the seeded evaluation harness.
//!
//! ```no_run
//! use std::sync::Arc;
//! use dspkit::cache::Cache;
//! use dspkit::example::Example;
//! use dspkit::lm::{Lm, MockLm};
//! use dspkit::programs::{Pipeline, ProgramConfig, ProgramInput, ProgramKind};
//! use dspkit::rm::{build_index, load_corpus};
//! use dspkit::template::TemplateSet;
//!
//! # fn main() -> dspkit::Result<()> {
//! let index = build_index(load_corpus("corpus.tsv".as_ref())?)?;
//! let mock = MockLm::from_path("script.jsonl".as_ref())?;
//! let lm = Lm::new(Arc::new(mock), Arc::new(Cache::memory()));
//! let templates = TemplateSet::builtin();
//! let cfg = ProgramConfig::default();
//! let pipeline = Pipeline { lm: &lm, rm: &index, templates: &templates, cfg: &cfg };
//!
//! let train: Vec<Example> = Vec::new();
//! let out = pipeline.run(
//!     ProgramKind::Multihop,
//!     &ProgramInput::Question("How many storeys does the castle have?".into()),
//!     &train,
//! )?;
//! println!("{}", out.pred().unwrap_or(""));
//! # Ok(())
//! # }
//! ```

pub mod cache;
pub mod demonstrate;
mod error;
pub mod eval;
pub mod example;
pub mod lm;
pub mod predict;
pub mod programs;
pub mod rm;
pub mod search;
pub mod template;
pub mod trace;

pub use error::{DspError, Result};
pub use example::{chain, Example, Transformation, Value};
