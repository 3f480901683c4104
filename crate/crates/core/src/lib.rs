//! Demographic representation metrics over product funnels.
//!
//! The crate counts how a focal and a reference group move through an
//! ordered funnel, derives raw, normalized and survival ratios per layer,
//! adjusts survival ratios for confounders with coarsened exact matching,
//! classifies the result with traffic-light thresholds, and compares A/B
//! experiment arms with log-ratio inference.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cem;
pub mod cli;
pub mod error;
pub mod inference;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod report;
pub mod status;
pub mod synth;

pub use error::{Error, Result};
