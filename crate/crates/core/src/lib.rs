//! Dialog state tracking posed as generative question answering.
//!
//! A dialog's belief state is tracked by asking a decoder-only transformer
//! one natural-language question per slot at every user turn and decoding
//! the answer greedily. The crate covers the whole pipeline:
//!
//! - [`corpus`]: dialog/belief-state data model, a deterministic synthetic
//!   multi-domain corpus generator, ingestion of MultiWOZ-shaped files, and
//!   training-example serialization (including carry-over target rewriting);
//! - [`tokenizer`]: byte-level BPE with atomic special tokens;
//! - [`model`]: the transformer with hand-written forward and backward passes;
//! - [`training`]: loss-mask variants (LM / CLM / CLMQ), masked cross-entropy,
//!   the LAMB optimizer, and the training loop;
//! - [`inference`]: greedy slot-value generation and carry-over resolution;
//! - [`evaluation`]: joint goal accuracy (supervised, zero-shot, per-turn),
//!   the oracle carry-over bound, and error-modality analysis.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
