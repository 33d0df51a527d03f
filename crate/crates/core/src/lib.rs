//! Frequency-based originality scoring for divergent-thinking responses.
//!
//! Ideas for each task are grouped into buckets of rephrasings by an LLM judge
//! that compares every incoming idea against a handful of nearest existing
//! buckets. Bucket prevalence then drives four originality metrics, and the
//! [`psychometrics`], [`distfit`] and [`report`] modules evaluate the result
//! against reference annotations.

pub mod baselines;
pub mod bucketer;
pub mod codebook;
pub mod corpus;
pub mod distfit;
pub mod embed;
pub mod error;
pub mod judge;
pub mod psychometrics;
pub mod report;
pub mod scoring;
pub mod transport;

pub use error::{Error, Result};
