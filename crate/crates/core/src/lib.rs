//! Code comparison tuning at desk scale.
//!
//! The crate covers the whole loop: lexing and bug injection
//! ([`code_model`], [`mutation`]), comparison dataset construction
//! ([`sample_builder`]), a small decoder-only transformer with hand-written
//! gradients and the three-term objective ([`trainer`]), and a sandboxed
//! pass@k harness ([`eval`]). [`pipeline`] wires these into the jobs the
//! `cct` binary exposes.

pub mod code_model;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod mutation;
pub mod pipeline;
pub mod sample_builder;
pub mod trainer;

pub use error::{CctError, Result};
