//! Desk-scale text generation with dynamic sentence-level planning.
//!
//! The crate provides, from scratch: a tape-based autodiff tensor substrate
//! with AdamW ([`tensor`], [`optim`]), an encoder-decoder model whose decoder
//! interleaves latent sentence-plan tokens and attends a keyphrase memory
//! bank ([`model`]), a data pipeline with topic-signature keyphrase scoring
//! and a deterministic synthetic corpus generator ([`data`]), incoherent
//! negative-target construction ([`negatives`]), the joint training loop
//! ([`training`]), constrained nucleus decoding ([`decoding`]) and an
//! evaluation suite with a trainable coherence scorer ([`eval`]).

pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod error;
pub mod model;
pub mod negatives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod signatures;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use rng::SeedRng;
pub use tensor::{NodeId, Tape, Tensor};
