//! Joint RP/SP nested-logit estimation of intercity destination and mode choice,
//! trip-generation regressions and logsum-based scenario forecasting.

pub mod data;
pub mod engine;
pub mod error;
pub mod estimation;
pub mod forecast;
pub mod numeric;
pub mod optim;
pub mod spec;
pub mod synth;
pub mod tripgen;
pub mod validate;

pub use error::{Error, Result};
