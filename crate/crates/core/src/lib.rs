//! Survival analysis for tabular data with neural survival heads.
//!
//! Models discretize time on the unique training event times and predict
//! either bin logits (softmax heads) or Weibull parameters per ensemble
//! member. Training minimizes a censored histogram loss; evaluation uses
//! Harrell's C-index, an IPCW integrated Brier score and the cumulative /
//! dynamic AUC.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod orchestration;
pub mod simulation;
pub mod survhl;
pub mod timegrid;

pub use error::{Result, SurvError};
