//! Entity-aware adapters over a frozen transformer backbone, trained with a
//! hard-negative reweighted contrastive objective on context-marked synonym
//! instances.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense 2-D kernels, parameters and a small reverse-mode tape
//! - [`corpus`]: vocabulary, instances, synsets, filtering, balancing, batching
//! - [`model`]: frozen backbone, entity-aware adapter, aggregator, checkpoints
//! - [`loss`]: the contrastive pre-training objective and its gradient
//! - [`trainer`]: deterministic Adam training and continual multi-domain injection
//! - [`eval`]: embeddings, Acc@k retrieval, HAC canonicalization, ambiguity probe
//! - [`cli`]: batch-mode command entry points

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
