//! Evaluation metrics and the retrieval embedder behind the embedding-based
//! ones.

pub mod metrics;
pub mod report;
pub mod retrieval;

pub use metrics::*;
pub use report::*;
pub use retrieval::*;
