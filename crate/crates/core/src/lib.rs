//! Forest-to-sequence attentional neural machine translation.
//!
//! Source sentences are encoded as word sequences (LSTM) plus phrase
//! embeddings computed bottom-up over a packed parse forest: a binary
//! tree-LSTM builds one embedding per derivation of a phrase and a
//! forest-LSTM fuses them, weighted by rule probabilities, into one unified
//! embedding. An attentional decoder with input feeding attends over words
//! and phrases together.
//!
//! Three modes share the pipeline: [`Mode::Vanilla`] (words only),
//! [`Mode::Tree`] (one binary tree per sentence) and [`Mode::Forest`].

pub mod check;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod forest;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod train;

pub use corpus::{Bitext, Vocabulary};
pub use decoder::{AttentionRecord, AttentionStep};
pub use encoder::{EncodedSource, State};
pub use forest::{PackedForest, Tree};
pub use model::{Dims, Mode, ModelParams, SourceInput};
pub use numcore::{ParamStore, Tape, Tensor, Var};
pub use train::{Checkpoint, TrainConfig};

use forest::ForestError;
use numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("line count mismatch: {source_lines} source, {target_lines} target, {forest_blocks} forest blocks")]
    Alignment { source_lines: usize, target_lines: usize, forest_blocks: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail} (gradient norm {grad_norm:e})")]
    Diverged { epoch: usize, batch: usize, grad_norm: f64, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
