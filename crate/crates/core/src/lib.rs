// `!(x > 0.0)` is the NaN-rejecting form used throughout for argument checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod diagnose;
pub mod error;
pub mod estimate;
pub mod expfam;
pub mod numerics;
pub mod parallel;
pub mod qselect;
pub mod simulate;

pub use error::{Error, Result};
