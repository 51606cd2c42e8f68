//! Pseudo-label self-training on synthetic segmentation tasks: data
//! generation, metrics, a small per-pixel learner, the training schedules
//! (self-learning, scratch retraining, alternate cross-subset training),
//! label-noise analysis and reporting.

pub mod benchmarks;
pub mod datasets;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod noise_analysis;
pub mod orchestrator;
pub mod reporting;
pub mod seeds;

pub use error::{Error, Result};
