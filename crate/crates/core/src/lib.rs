//! Sentence encoder with dynamic attention-score token pruning, and the
//! few-shot intent-classification harness used to tune and measure it.
//!
//! The pipeline is `tokenizer` → `encoder` (with an optional `pruner` hook at
//! one layer) → mean pooling and L2 normalization → `classifier`. The
//! `adaptation` module searches the pruning configuration over a suite of
//! tasks; `bench` covers dataset ingestion, few-shot sampling and timing.

pub mod adaptation;
pub mod bench;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod model_io;
pub mod pruner;
pub mod tokenizer;

pub use encoder::{encode, AttentionScores, HiddenStates, SentenceEmbedding};
pub use error::{Error, Result};
pub use model_io::{init_random_encoder, load_bundle, load_model, EncoderConfig, EncoderModel};
pub use pruner::PruneConfig;
pub use tokenizer::{tokenize, TokenizedBatch, Vocab};
