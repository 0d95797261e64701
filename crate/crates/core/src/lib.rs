//! Doubly robust, locally efficient estimation of treatment effects in
//! randomized trials augmented with external control data.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: the composite (trial + external) data model, CSV I/O and
//!   validation.
//! - [`nuisance`]: working models for outcomes, propensities and the
//!   trial/external variance ratio.
//! - [`estimators`]: point estimators, influence functions and efficiency
//!   quantities.
//! - [`inference`]: variances, tests, the exchangeability check and bias
//!   diagnostics.
//! - [`simlab`]: the simulation data-generating process and Monte Carlo
//!   harness.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod simlab;

pub use error::{Error, ErrorClass, ErrorCode, Result};

// The guide's code blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/nuisance.md")]
    mod nuisance {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
