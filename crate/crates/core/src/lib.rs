//! Deterministic harness for measuring how data leakage in train/validation/test
//! splits inflates the correlations reported by quality-assessment pipelines.
//!
//! The crate reconstructs, at desk scale, a three-stage pipeline: a surrogate
//! network fine-tuned on binned quality labels, feature extraction from its
//! hidden layers, and a quality predictor (ε-SVR over pooled features, an
//! LSTM over frame sequences, or an end-to-end regressor). Clean and leaky
//! split protocols run on synthetic grouped data, and every run is audited
//! for group leakage and tainted test sets.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod svr;
pub mod split;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/grouped-data.md")]
    mod grouped_data {}
    #[doc = include_str!("../../../book/src/splits.md")]
    mod splits {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/protocols.md")]
    mod protocols {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
