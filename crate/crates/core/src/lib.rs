//! Intrusion detection for IoT-style network flow datasets.
//!
//! The pipeline chains five stages over a [`ingest::DatasetTable`]:
//! stratified k-fold splitting, per-fold normalization, randomized truncated
//! SVD ([`linalg::randomized_svd`]), feature selection (chi-squared filter
//! and network weight ablation, see [`featsel`]) and an LSTM classifier
//! trained with RMSProp ([`nn`]). Each fold is scored with the metrics in
//! [`eval`] and the whole experiment is driven by [`pipeline::run_experiment`].

pub mod error;
pub mod eval;
pub mod featsel;
pub mod ingest;
pub mod linalg;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
