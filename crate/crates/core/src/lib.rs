// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron-level profiling, probing and merging for small decoder-only
//! transformers.
//!
//! The crate bundles a reference toy transformer, per-neuron impact
//! scoring, activation amplification probes, a masked low-rank merge
//! (SNRF) with linear and DARE baselines, and a synthetic quadratic-loss
//! validator for the merge bound.

// Dense numeric kernels read more clearly with explicit index loops.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod manifest;
pub mod merge;
pub mod model;
pub mod neuron;
pub mod probe;
pub mod profile;
pub mod tensor;
pub mod theory;

pub use checkpoint::{load_checkpoint, save_checkpoint, ProbeCorpus, WeightMap};
pub use error::{CheckpointError, Error, Result};
pub use model::{forward, greedy_decode, Intervention, ModelConfig, TokenId};
pub use neuron::{NeuronId, NeuronKind, NeuronSet};
pub use tensor::{Axis, Matrix, Matrix64};
