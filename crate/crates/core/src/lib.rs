// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the formulas in numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rebalance;
pub mod trainer;

pub use error::{Error, Result};
