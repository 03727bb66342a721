#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
pub mod engine;
pub mod error;
pub mod estimator;
mod linalg;
pub mod mask;
pub mod metrics;
pub mod scene;
pub mod tfx;
pub mod train;

pub use error::{Error, Result};
