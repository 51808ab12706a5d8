//! Causal chain of death generation.
//!
//! Priority-ordered discharge diagnoses (ICD-9 or ICD-10) are transduced into
//! an ordered chain of ICD-10 death codes, underlying cause first, by
//! attentional encoder-decoder models. Decoding can be constrained by a
//! causal-validity graph built from an ACME decision table.
//!
//! Module map:
//! - [`icd`]: code normalization and ICD-9 to ICD-10 GEM crosswalk
//! - [`acme`]: decision table parsing, validity queries, corpus filtering, decoding masks
//! - [`corpus`]: records, parallel files, vocabularies, splits, synthetic data
//! - [`nn`]: parameters, initialization, Adam, clipping, gradient checking, checkpoints
//! - [`model`]: LSTM, mean, bidirectional and transformer encoder-decoders
//! - [`search`]: greedy and (constrained) beam search
//! - [`eval`]: modified BLEU, accuracies, attention export
//! - [`pipeline`]: experiment grid, configuration
//! - [`service`]: HTTP API

pub mod acme;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod icd;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod service;

pub use error::{Error, Result};
