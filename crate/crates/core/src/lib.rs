//! Multi-domain neural machine translation through multi-teacher,
//! word-level knowledge distillation.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`] loads and filters parallel text, learns joint BPE and owns the vocabulary.
//! * [`lm`] trains interpolated n-gram language models used to score sentences.
//! * [`selection`] ranks generic data by cross-entropy difference and drives
//!   gradual finetuning on a shrinking generic subset.
//! * [`model`] is a small tanh RNN encoder-decoder with hand-written backpropagation,
//!   Adam and Noam decay.
//! * [`distill`] holds the NLL / teacher-matching loss family and the top-K soft-target store.
//! * [`pipeline`] wires the stages together: generic model, teachers, stores, student
//!   and the finetuning / ensembling baselines.
//! * [`eval`] computes corpus BLEU and compares experiment outcomes.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod pipeline;
pub mod selection;
pub mod synthetic;

pub use error::{Error, Result};
