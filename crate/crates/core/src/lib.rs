//! Function-on-scalar regression for complex survey designs.
//!
//! The estimator fits a survey-weighted GLM at every point of the functional
//! domain, smooths each coefficient function with penalized splines, and
//! derives pointwise and joint (CMA) confidence bands from replicate fits
//! under the unweighted bootstrap, the survey-weighted bootstrap, balanced
//! repeated replication or the Rao-Wu-Yue-Beaumont bootstrap.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod family;
pub mod glm;
pub mod inference;
pub mod resampling;
pub mod rng;
pub mod simulation;
pub mod smoothing;

pub use data::{summarize_design, ColumnMap, DatasetParts, DesignSummary, FunctionalDesignDataset};
pub use error::{Error, Result};
pub use family::GlmFamily;
pub use glm::{fit_pointwise, IrlsOptions, RawCoefficientMatrix};
pub use inference::{cma_quantile, fit_svy_fosr, BandEstimate, FitOptions, PointwiseMultiplier, SvyFosrFit};
pub use resampling::BootScheme;
pub use smoothing::{Lambda, SmootherSpec};
