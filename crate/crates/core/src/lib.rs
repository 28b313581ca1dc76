//! Core library for duration-aware speech-to-text translation on a synthetic
//! timing-annotated corpus.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] / [`optim`] — a small dense-array kernel with
//!   reverse-mode automatic differentiation and an AdamW optimizer, enough to
//!   run a transformer encoder-decoder on CPU.
//! * [`vocab`] / [`data`] — the joint token vocabulary, the synthetic corpus
//!   generator, target-side sequence preparation, and corpus file I/O.
//! * [`model`] — the transformer encoder, the timing-conditioned decoder input
//!   builder, the causal decoder, and the token/duration output heads.
//! * [`training`] — the joint token+duration loss, the training loop with
//!   linear learning-rate decay, checkpointing, and gradient verification.
//! * [`inference`] — timing-state bookkeeping, greedy decoding, and beam
//!   search that tracks remaining frames per hypothesis.
//! * [`metrics`] — speech-overlap and corpus BLEU scoring over decoded output.

pub mod config;
pub mod data;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
