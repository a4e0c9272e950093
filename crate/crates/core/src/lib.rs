//! Training small autoregressive language models on multi-reference cloze data
//! and measuring how closely their next-word distributions match the spread of
//! human continuations.
//!
//! The pieces, bottom up:
//!
//! * [`tokenizer`] — greedy BPE with a word-start marker.
//! * [`corpus`] — cloze datasets, annotation multisets, empirical distributions.
//! * [`lm`] — a fixed-window MLP language model with manual gradients and Adam.
//! * [`wordprob`] — word probabilities and word-level sampling from token models.
//! * [`losses`] — single-label and distribution-matching losses, training loop.
//! * [`eval`] — Monte-Carlo model distributions, total variation, reports.
//! * [`synth`] — synthetic worlds with known true distributions.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod losses;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod wordprob;

pub use corpus::{
    AnnotationMultiset, ClozeDataset, ClozeItem, ContextFormat, Cpd, InstructionPair,
    PromptTemplate, Splits,
};
pub use error::{Error, Result};
pub use eval::{ContextMetrics, EvalReport, SamplingConfig};
pub use lm::{Checkpoint, LmConfig, NextTokenModel, Tensors, TinyLm};
pub use losses::{LossMode, TrainConfig, TrainItem, TrainLog};
pub use synth::SyntheticWorld;
pub use tokenizer::{MergeTable, TokenId, TokenSeq};
