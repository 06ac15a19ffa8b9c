//! Reproducible experiments: one JSON config drives data, model, objective,
//! evaluation, fine-tuning stability and representation analysis.

mod analysis;
mod config;
mod eval;
mod inference;
mod runner;

pub use analysis::*;
pub use config::*;
pub use eval::*;
pub use inference::*;
pub use runner::*;
