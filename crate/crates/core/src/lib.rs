//! Slice-level auditing for black-box binary classifiers.
//!
//! The pipeline ingests precomputed multimodal embeddings plus labels and
//! predictions, fuses them into a single representation, discovers
//! coherent high-error subgroups ("error slices") with a label-aware
//! Gaussian mixture, and explains each slice by its most distinctive
//! report/metadata tokens. A synthetic bias laboratory and a bootstrap
//! harness validate the whole chain end to end.

pub mod biaslab;
pub mod config;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fusion;
pub mod ingest;

pub use config::AuditConfig;
pub use error::{AuditError, Result};
pub use ingest::{Dataset, Sample, TokenDoc};
