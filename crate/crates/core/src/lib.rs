//! Mining web push notification logs for ad campaigns and malicious
//! notifications.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! the types the pipeline uses in practice.

pub mod error;
pub mod scalar;

pub mod psl;
pub mod model;
pub mod tokenize;
pub mod ingest;
pub mod synth;

pub mod embeddings;
pub mod matrix;
pub mod similarity;
pub mod clustering;
pub mod verdicts;
pub mod labels;
pub mod metacluster;
pub mod filterlist;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
pub use model::{BagOfWords, Platform, UrlParts, WpnRecord};
pub use scalar::{Exact, Real, Scalar};

pub type DistanceMatrix = matrix::CondensedMatrix<f64>;
pub type ExactDistanceMatrix = matrix::CondensedMatrix<Exact>;
pub type Embeddings = embeddings::EmbeddingTable<f64>;
pub type TermSimilarityMatrix = embeddings::TermSimilarity<f64>;
