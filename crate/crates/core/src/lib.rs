//! Empirical Bayes prior estimation from study archives, stratified
//! propensity design under three decision objectives, and numerical
//! regret diagnostics.

pub mod config;
pub mod design;
pub mod error;
pub mod linalg;
pub mod normal;
pub mod posterior;
pub mod prior;
pub mod regret;
pub mod sample_data;
pub mod study_data;

pub use config::{ComplianceMode, StrataConfig};
pub use error::{Error, Result};
pub use prior::{DiscretePrior, FitReport, GaussianPrior, OptimizerOptions, Prior, Structure};
pub use study_data::{StudyArchive, StudySummary};
