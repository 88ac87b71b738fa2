//! Fairness-aware robustness audits for face recognition models.
//!
//! Images are perturbed along stimulus ladders, embedded by a provider, and
//! compared with their originals. Per-level differences between a protected
//! subgroup and its complement (verification GAR at a fixed FAR, or
//! self-match rate) form bias curves, which reduce to signed AUC matrices
//! with L1 marginals.
//!
//! The numerical core is generic over the scalar type; the aliases below are
//! the concrete types the pipeline uses.

pub mod analysis;
pub mod config;
pub mod curves;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod perturb;
pub mod report;
pub mod run;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{AucScalar, Scalar};

/// Provider output: one `f32` row per image.
pub type EmbeddingMatrix = embed::EmbeddingMatrix<f32>;
/// Cosine similarities at provider precision.
pub type SimilarityMatrix = metrics::SimilarityMatrix<f32>;
/// AUC matrix as written to reports.
pub type AucMatrix = analysis::AucMatrix<f64>;
/// AUC matrix in exact rational arithmetic; marginal identities hold exactly.
pub type ExactAucMatrix = analysis::AucMatrix<num_rational::BigRational>;
