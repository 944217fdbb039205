// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod ingest;
pub mod container;
pub mod dsp;
pub mod model;
pub mod train;
pub mod decomp;
pub mod baselines;
pub mod fusion;
pub mod eval;
pub mod selftest;
pub mod cli;
