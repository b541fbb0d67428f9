//! Query-aware multi-path knowledge-graph fusion for retrieval-augmented
//! generation: a triple store, vector indices, subgraph builders, an
//! attention reward model, subgraph fusion, the retrieval pipeline and
//! evaluation metrics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the pipeline uses throughout.

pub mod client;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kg;
pub mod metrics;
pub mod pipeline;
pub mod reward;
pub mod scalar;
pub mod subgraph;
pub mod text;
pub mod vector;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Embedding = vector::EmbeddingVector<f64>;
pub type Index = vector::VectorIndex<f64>;
pub type Adapter = vector::AdapterParams<f64>;
pub type RewardParams = reward::AttentionParams<f64>;
pub type PageRank = subgraph::PageRankConfig<f64>;
pub type PageRankScores = subgraph::PageRankResult<f64>;
