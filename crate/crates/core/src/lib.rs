//! Core algorithms for knowledge-graph-augmented machine translation.
//!
//! Everything in this crate is pure computation over in-memory values and
//! only needs an allocator: the knowledge-graph model and name index, the
//! dense entity retriever and its contrastive training, a small
//! encoder-decoder translator with explicit (`[KG]` suffix) and implicit
//! (embedding prefix) knowledge integration, entity-level and n-gram
//! metrics, and the seeded synthetic benchmark generator.
//!
//! File formats, checkpoints and the command line live in the `kgmt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod encoder;
pub mod gradcheck;
pub mod hash;
pub mod kg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod records;
pub mod retriever;
pub mod tensor;
pub mod text;
pub mod translator;
pub mod vocab;

pub use encoder::{EncoderConfig, EncoderParams, Vector};
pub use kg::{Entity, KgError, KnowledgeGraph, LanguageCode};
pub use retriever::{EntityIndex, RetrieverConfig};
pub use translator::{IntegrationMode, Seq2SeqConfig, Seq2SeqParams};
pub use vocab::{TokenSequence, Vocabulary};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
