//! Balanced logit-distribution estimation and adjustment for class-biased
//! self-training.
//!
//! Layers, bottom-up: [`gmm`] (1-D mixtures and momentum EM),
//! [`logit_stats`] (logit-set matrices, banks, bias estimators), [`align`]
//! (quantile-mapping offsets), [`losses`], [`metrics`], the [`toyuda`]
//! harness and the file formats and CLI in [`cli_io`].

pub mod align;
pub mod cli_io;
pub mod config;
pub mod error;
pub mod gmm;
pub mod logit_stats;
pub mod losses;
pub mod metrics;
pub mod toyuda;

pub use config::Config;
pub use error::{BldaError, Result};
