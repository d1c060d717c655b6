// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attributors;
pub mod cli;
pub mod datahub;
pub mod error;
pub mod evalkit;
pub mod grouping;
pub mod hessians;
pub mod models;
pub mod numkit;

pub use error::{Error, Result};
