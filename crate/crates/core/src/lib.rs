#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Survival-analysis toolkit and benchmarking harness.
//!
//! Everything revolves around the Cox partial likelihood in
//! [`cox_objective`]: linear Cox models, boosted trees and the feed-forward
//! network all optimise it, and the random survival forest is scored with the
//! same concordance metrics. [`harness`] runs nested cross-validation over
//! model grids and writes deterministic reports.

pub mod cli;
pub mod cox_linear;
pub mod cox_objective;
pub mod dataset;
pub mod error;
pub mod forest_survival;
pub mod gbt_survival;
pub mod harness;
pub mod metrics;
pub mod mlp_survival;
pub mod preprocess;
pub mod rng;
pub mod special;
pub mod tree;

pub use error::{Error, Result};
