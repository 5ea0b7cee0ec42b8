//! Sequential position encoding for tiny transformers, on a self-contained
//! f64 reverse-mode autodiff core.
//!
//! Positions are rendered as fixed-width digit sequences and encoded by a
//! small causal transformer into embedding vectors; the surrounding crate
//! provides the classic alternatives (sinusoidal / learned absolute tables,
//! RoPE, ALiBi, none) behind one provider interface, the distance and
//! out-of-distribution regularizers that shape the encoder's geometry, and
//! two desk-scale tasks (a character-level language model and a 2-D grid
//! classifier) to exercise everything end to end.
//!
//! Everything is computed in `f64` on the CPU with no external tensor
//! library, so every gradient in the crate can be checked against central
//! finite differences (see [`numerics::gradcheck`]).

pub mod baselines;
pub mod encoder;
pub mod error;
pub mod integration;
pub mod numerics;
pub mod positions;
pub mod provider;
pub mod regularizers;
pub mod tasks;

pub use error::{Result, SeqPeError};
