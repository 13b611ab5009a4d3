//! Multi-modal knowledge graph completion.
//!
//! Entities carry three views: a learned structural embedding, a sequence of
//! visual tokens and a sequence of textual tokens. Token sequences are
//! projected into a shared space and summarised by a small transformer, the
//! three views are blended by a learned attention vector, and a transformer
//! decoder predicts the tail of `(head, relation, ?)` queries. Visual and
//! textual summaries are additionally pulled toward the structural embedding
//! of the same entity with in-batch InfoNCE.
//!
//! The numeric work runs on [`tsam_autodiff`]; every forward pass is generic
//! over the scalar type so gradients can be verified in `f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod fusion;
mod init;
pub mod kge;
pub mod model;
pub mod sacl;
pub mod trainer;
mod transformer;

pub use config::RunConfig;
pub use data::{Modality, Split, TokenBank, Triple, TripleStore};
pub use error::{Error, FormatError, Result};
pub use evaluator::Metrics;
pub use model::{Model, ModelConfig};
pub use trainer::{TrainConfig, Trainer};
pub use transformer::TransformerConfig;
pub use tsam_autodiff::ParamStore;
