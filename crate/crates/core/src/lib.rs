//! Panel causal-inference estimators and a collateral-constrained household
//! pricing model.
//!
//! * [`panel`]: long-format panel data, ingestion and transforms
//! * [`regress`]: weighted least squares with absorbed fixed effects
//! * [`infer`]: heteroskedasticity-robust, clustered and spatial variances
//! * [`did`]: static, event-study and triple-difference designs
//! * [`synth`]: elastic-net synthetic control with placebo inference
//! * [`housemodel`]: household Euler/pricing conditions and decompositions
//! * [`dgp`]: synthetic panels with known treatment effects

pub mod error;
pub mod numeric;
pub mod panel;
pub mod infer;
pub mod regress;
pub mod did;
pub mod synth;
pub mod dgp;
pub mod housemodel;
pub mod montecarlo;

pub use error::{Error, Result};
