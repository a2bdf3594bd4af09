//! Regularized gradient-boosted trees for lawful/unlawful insider-trade
//! classification, with preprocessing, tuning, metrics, feature importance
//! and a reproducible repeated-resampling harness.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod gbt;
pub mod harness;
pub mod importance;
pub mod metrics;
pub mod preprocess;
pub mod seeds;
pub mod textfmt;
pub mod tuning;

pub use error::{Error, Result};

/// Guide chapters compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/boosting.md")]
    mod boosting {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/importance.md")]
    mod importance {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
