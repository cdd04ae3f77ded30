//! Counterfactual attentiveness testing for black-box classifiers over
//! paired inputs such as premise/hypothesis or question/passage.

pub mod cfgen;
pub mod dataspec;
pub mod digest;
pub mod error;
pub mod metrics;
pub mod modelio;
pub mod pipeline;
pub mod promptkit;
pub mod report;

pub use error::{CatError, Result};
