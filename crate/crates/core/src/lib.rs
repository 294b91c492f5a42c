// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probing multilingual sentence embeddings for typological (WALS)
//! features, and measuring how much of that signal survives when language
//! centroids are subtracted.
//!
//! Pipeline: [`corpus`] defines features, annotations and paired tasks;
//! [`embedding`] stores per-language matrices; [`neutralise`] subtracts
//! centroids; [`probe`] is the MLP classifier; [`experiment`] runs the
//! baseline/self/cross modes and writes reports; [`synth`] builds worlds
//! with planted ground truth.

pub mod cli;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod neutralise;
pub mod probe;
pub mod rng;
pub mod synth;

pub use error::{Error, FormatError, Result};
