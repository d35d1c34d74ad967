//! Audit harness for text-to-image evaluation metrics.
//!
//! Checks whether a metric ranks generators consistently across seeds,
//! how much its score moves under a +1 intensity shift, and whether
//! pairwise differences it reports are statistically meaningful.

pub mod cli;
pub mod conformance;
pub mod model;
pub mod perturb;
pub mod report;
pub mod robustness;
pub mod scorer;
pub mod significance;
pub mod stats;

mod fsutil;
