//! Structure-guided sparse mixture-of-experts forecasting: regime
//! descriptors, a learned regime predictor, descriptor-anchored expert
//! priors, an expert-routed patch transformer, training and analysis.

pub mod backbone;
pub mod descriptors;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod parallel;
pub mod prior;
pub mod regime;
pub mod scalar;
pub mod series;
pub mod synthetic;
pub mod training;

pub use error::{AmeError, Result};
pub use scalar::Scalar;

pub type Series32 = series::Series<f32>;
pub type Series64 = series::Series<f64>;
pub type ModelState32 = backbone::ModelState<f32>;
pub type ModelState64 = backbone::ModelState<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Checkpoint64 = training::Checkpoint<f64>;
pub type RegimeProfile32 = descriptors::RegimeProfile<f32>;
pub type RegimeProfile64 = descriptors::RegimeProfile<f64>;
