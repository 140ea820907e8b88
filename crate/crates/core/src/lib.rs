//! Evasion attacks on learned source-code vulnerability detectors.
//!
//! The pipeline trains an attention-based surrogate, selects important
//! non-vulnerable samples with a linear SVM, ranks the tokens the surrogate
//! attends to, turns them into dead-code snippets, and searches snippet
//! combinations with a fuzzy-clustering genetic algorithm against a
//! black-box victim.

pub mod attack;
pub mod corpus;
pub mod featureid;
pub mod fga;
mod http;
pub mod par;
pub mod pool;
pub mod snippetgen;
pub mod surrogate;
pub mod svmcore;
pub mod synth;
pub mod targetzoo;

pub use corpus::{CodeSample, Label, Language};
