//! Passage reranking from hybrid sparse/dense collaborative similarity
//! features.
//!
//! The pipeline: load a corpus, an initial run, and precomputed vectors;
//! build BM25 statistics ([`sparse`]) and dense scores ([`dense`]); turn each
//! query's candidate list into a normalized similarity tensor against anchor
//! passages ([`features`]); score it with a small axial transformer
//! ([`model`]) trained with a multi-positive contrastive loss ([`train`]);
//! evaluate with [`metrics`].

pub mod corpus;
pub mod dense;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
mod io_util;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use io_util::atomic_write;
