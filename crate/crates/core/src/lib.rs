// Validation is written as `!(x >= lo)` so that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod early_exit;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod runner;
pub mod smart;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
