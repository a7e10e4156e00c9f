//! Image-based data-quality monitoring for detector plots.
//!
//! The pipeline runs from ingestion to live alarms:
//!
//! - [`catalog`]: two-arm relational store. Arm A holds images, labels, models,
//!   inferences and thresholds; arm B holds live operational decisions.
//! - [`labeling`]: permissioned, chronological labeling with range fill.
//! - [`dataset`]: training manifests, strategic under-sampling, stratified splits.
//! - [`classifier`]: backend interface plus the `softmax-v1` reference model.
//! - [`evaluation`]: bulk inference, disagreement reports, confidence-augmented
//!   confusion matrices and false-positive-rate threshold calibration.
//! - [`gatekeeper`]: polling watcher that classifies, alarms, flags and samples.
//! - [`synthgen`]: deterministic synthetic occupancy plots for tests and demos.
//! - [`pipeline`]: end-to-end training of one plot type from the catalog.

pub mod catalog;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gatekeeper;
pub mod labeling;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};

/// All persisted timestamps are UTC with whole-second precision.
pub type Timestamp = chrono::DateTime<chrono::Utc>;

/// Current time truncated to whole seconds.
pub fn now() -> Timestamp {
    let now = chrono::Utc::now();
    chrono::DateTime::from_timestamp(now.timestamp(), 0).expect("in range")
}
