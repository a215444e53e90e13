//! Knowledge-aware pretraining machinery for radiology language models.
//!
//! The crate covers the data side (report cleaning, section identification,
//! chunking, taxonomy-gated vocabulary extension, entity annotation and the
//! knowledge-aware masking scheduler) and the numeric side (contrastive
//! vocabulary regularizer, generator/discriminator losses, the anatomical-site
//! discriminator regularizer, and a tiny encoder that trains against them).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the
//! double-precision instantiations used by the pipeline and the CLI.

pub mod annotator;
pub mod corpus;
pub mod fixtures;
pub mod jsonl;
pub mod losses;
pub mod masking;
pub mod pipeline;
pub mod scalar;
pub mod syngen;
pub mod taxonomy;
pub mod tokenizer;
pub mod toymodel;
pub mod verify;

pub use scalar::Scalar;

/// Double-precision sentence-encoding batch.
pub type EncodingBatchF64 = losses::EncodingBatch<f64>;
/// Single-precision sentence-encoding batch.
pub type EncodingBatchF32 = losses::EncodingBatch<f32>;
/// Double-precision replaced-token-detection batch.
pub type RtdBatchF64 = losses::RtdBatch<f64>;
/// Single-precision replaced-token-detection batch.
pub type RtdBatchF32 = losses::RtdBatch<f32>;
/// The encoder used by the training loop.
pub type Encoder = toymodel::TinyEncoder<f64>;
/// Single-precision encoder, forward use only.
pub type EncoderF32 = toymodel::TinyEncoder<f32>;
/// Generator/discriminator pair used by the training loop.
pub type ElectraPair = toymodel::ElectraPair<f64>;
