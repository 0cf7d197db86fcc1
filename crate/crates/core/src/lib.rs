//! Multi-granularity graph structure attention (MGSA) for
//! knowledge-graph-to-text generation, implemented from scratch.
//!
//! Pipeline: [`kg`] ingestion and head clustering, [`linearize`] into an
//! entity-level and a word-level token sequence, [`structure`] matrices,
//! the structure-biased [`encoder`] with its aggregation module, the
//! [`seq2seq`] decoder with training and decoding, and [`metrics`].

pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod kg;
pub mod layers;
pub mod linearize;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod seq2seq;
pub mod structure;
pub mod synthetic;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
