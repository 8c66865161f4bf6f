//! File formats, dataset directories, the training pipeline and the
//! command-line front end around `protoseg-core`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod pb3d;
pub mod pipeline;
pub mod pt3d;
pub mod report;

pub use error::{CliError, Result};
