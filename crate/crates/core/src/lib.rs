//! Quality measures for labeled scatterplots and a pairwise preference model
//! that combines them into an interpretability score.
//!
//! - [`data`]: visualizations, preference logs and their file formats
//! - [`geometry`]: distances, neighbor orderings, class centroids
//! - [`measures`]: DSC, hypothesis margin, ABW, Q_NX / NH_AUC, feature vectors
//! - [`coxpref`]: the two-item Cox partial likelihood with L1 fitting
//! - [`harness`]: per-user subsampling and repeated user-level splits
//! - [`synth`]: synthetic datasets and oracle users

pub mod coxpref;
pub mod data;
mod error;
pub mod geometry;
pub mod harness;
pub mod measures;
pub mod scoring;
pub mod synth;

pub use coxpref::{CoxModel, FitConfig};
pub use data::{Choice, PreferenceDataset, PreferenceRecord, Visualization};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use measures::{FeatureVector, MeasureId};
pub use scoring::TiePolicy;
