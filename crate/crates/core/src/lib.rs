//! Tri-modal co-attention subtyping: cohort handling, tokenizers, transformer
//! encoders, fusion models, evaluation harness and attribution-driven
//! explanations.

pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod encoder;
pub mod explain;
pub mod error;
pub mod harness;
pub mod input;
pub mod models;
pub mod tokenize;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
