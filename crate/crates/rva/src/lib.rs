//! Recursive visual attention for dialog co-reference resolution.
//!
//! The crate bundles a small reverse-mode autodiff engine, bi-LSTM text
//! encoders with purpose-specific self-attention, the Infer/Pair/Att
//! decision modules with Gumbel straight-through sampling, the
//! recursive attention engine, a retrieval-style answer head, ranking
//! metrics, and a deterministic synthetic dialog benchmark.

pub mod answer;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod modules;
pub mod nn;
pub mod recursion;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
