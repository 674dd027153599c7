// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod detect;
pub mod diffcore;
pub mod error;
pub mod evalbench;
pub mod exec;
pub mod recipe;
pub mod robusttrain;
pub mod synthgen;
pub mod vqamodel;

pub use error::{Error, Result};
pub use exec::Exec;
