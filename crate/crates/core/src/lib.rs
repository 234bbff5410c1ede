//! Simulator for federated partially-supervised segmentation: clients that
//! each annotate a disjoint subset of organ classes jointly train a single
//! segmenter through teacher pseudo-labels, uncertainty-weighted losses and
//! aggregation, and sparse sharpness-aware local updates.

pub mod cli;
pub mod error;
pub mod federation;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod report;
pub mod susam;
pub mod synthdata;
pub mod uncertainty;

pub use error::{Result, UfpsError};
